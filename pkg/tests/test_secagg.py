"""Five-round aggregation protocol: correctness, dropout handling, abort
paths, mask sign convention, and transcript replay."""

import json

import numpy as np
import pytest

from fedmask.crypto import TOY_GROUP
from fedmask.numeric import (
    ParameterError,
    Rng,
    decode_fixed,
    encode_fixed,
    field_add,
    field_neg,
    field_sum,
)
from fedmask.secagg import (
    Phase,
    TRANSCRIPT_SCHEMA_VERSION,
    individual_mask,
    masked_input_vector,
    pairwise_mask,
    run_protocol,
    run_secagg,
)


def random_inputs(n, dim, seed=0):
    rng = Rng(seed).child("inputs")
    return [rng.child(i).uniform(-1.0, 1.0, dim) for i in range(n)]


def field_sum_oracle(inputs, frac_bits=24):
    """Plain field sum of the encoded inputs, the bit-exact expectation."""
    return field_sum([encode_fixed(v, frac_bits) for v in inputs])


# ---------------------------------------------------------------------------
# Honest runs
# ---------------------------------------------------------------------------


def test_two_clients_worked_example():
    t = run_secagg([[1.0, 2.0], [3.0, 4.0]], k=2, seed=0, params=TOY_GROUP)
    assert not t.aborted
    assert t.included == (0, 1)
    assert np.allclose(t.aggregate, [4.0, 6.0], atol=2**-20)
    assert t.aggregate_field == field_sum_oracle([np.array([1.0, 2.0]), np.array([3.0, 4.0])])


def test_honest_n10_matches_plain_sum():
    inputs = random_inputs(10, 8, seed=1)
    t = run_secagg(inputs, k=5, seed=1, params=TOY_GROUP)
    assert not t.aborted
    assert t.aggregate_field == field_sum_oracle(inputs)
    assert np.max(np.abs(t.aggregate - np.sum(inputs, axis=0))) < 2**-20


def test_n3_k2_honest_bit_exact():
    inputs = random_inputs(3, 4, seed=2)
    t = run_secagg(inputs, k=2, seed=2, params=TOY_GROUP)
    assert t.aggregate_field == field_sum_oracle(inputs)


def test_deterministic_given_seed():
    inputs = random_inputs(4, 6, seed=3)
    t1 = run_secagg(inputs, k=3, seed=3, params=TOY_GROUP)
    t2 = run_secagg(inputs, k=3, seed=3, params=TOY_GROUP)
    assert t1.to_jsonl() == t2.to_jsonl()
    assert t1.aggregate_field == t2.aggregate_field


# ---------------------------------------------------------------------------
# Dropouts
# ---------------------------------------------------------------------------


def test_dropout_before_masked_input_excludes_client():
    inputs = random_inputs(3, 4, seed=4)
    # client 1 answers through round 1 (key sharing), never sends masked input
    t = run_secagg(inputs, k=2, seed=4, dropout_after={1: 1}, params=TOY_GROUP)
    assert not t.aborted
    assert t.included == (0, 2)
    assert t.aggregate_field == field_sum_oracle([inputs[0], inputs[2]])


def test_dropout_after_masked_input_keeps_contribution():
    inputs = random_inputs(5, 4, seed=5)
    # client 2 sends its masked input but vanishes before unmasking
    t = run_secagg(inputs, k=3, seed=5, dropout_after={2: 2}, params=TOY_GROUP)
    assert not t.aborted
    assert 2 in t.included
    assert t.aggregate_field == field_sum_oracle(inputs)


def test_two_scheduled_dropouts():
    inputs = random_inputs(5, 4, seed=6)
    t = run_secagg(inputs, k=3, seed=6, dropout_after={0: 1, 4: 2}, params=TOY_GROUP)
    assert not t.aborted
    assert t.included == (1, 2, 3, 4)
    assert t.aggregate_field == field_sum_oracle([inputs[i] for i in (1, 2, 3)] + [inputs[4]])


def test_abort_below_threshold():
    inputs = random_inputs(5, 4, seed=7)
    t = run_secagg(inputs, k=5, seed=7, dropout_after={0: 1}, params=TOY_GROUP)
    assert t.aborted
    assert "below threshold" in t.abort_reason
    assert t.included == ()
    assert t.aggregate is None


def test_dropout_before_any_message():
    inputs = random_inputs(4, 4, seed=8)
    # dropout_after=-1 means the client never even advertises
    t = run_secagg(inputs, k=2, seed=8, dropout_after={3: -1}, params=TOY_GROUP)
    assert not t.aborted
    assert t.included == (0, 1, 2)
    assert t.aggregate_field == field_sum_oracle(inputs[:3])


# ---------------------------------------------------------------------------
# Mask structure
# ---------------------------------------------------------------------------


def test_pairwise_mask_sign_convention():
    """For a pair (i, j), i adds M_ij and j subtracts the same M_ij: the sum
    of both clients' mask terms for the pair is exactly zero in the field."""
    run = run_protocol(random_inputs(3, 4, seed=9), k=2, seed=9, params=TOY_GROUP)
    ci, cj = run.clients[0], run.clients[1]
    # both parties derived the same DH secret, hence the same mask
    assert ci.pair_secrets[1] == cj.pair_secrets[0]
    m_i = pairwise_mask(ci.pair_secrets[1], 4, 24)
    m_j = pairwise_mask(cj.pair_secrets[0], 4, 24)
    assert m_i == m_j
    # i (lower id) adds, j subtracts: contributions cancel
    assert field_add(m_i, field_neg(m_j)).residues.tolist() == [0, 0, 0, 0]


def test_masked_input_vector_definition():
    """c_i = encode(w_i) + M2_i + sum_{j>i} M_ij - sum_{j<i} M_ij."""
    run = run_protocol(random_inputs(3, 4, seed=10), k=2, seed=10, params=TOY_GROUP)
    state = run.clients[1]
    c = run.server.masked[1]
    expected = encode_fixed(state.weights, 24)
    expected = field_add(expected, individual_mask(state.kp2.sk, 4, 24))
    for j in state.participants:
        if j == 1:
            continue
        m = pairwise_mask(state.pair_secrets[j], 4, 24)
        expected = field_add(expected, m) if 1 < j else field_add(expected, field_neg(m))
    assert c == expected
    assert c == masked_input_vector(state)


def test_masked_input_hides_the_plain_encoding():
    inputs = random_inputs(2, 4, seed=11)
    run = run_protocol(inputs, k=2, seed=11, params=TOY_GROUP)
    plain = encode_fixed(inputs[0], 24)
    assert run.server.masked[0] != plain


def test_client_phases_terminal():
    run = run_protocol(random_inputs(3, 4, seed=12), k=2, seed=12, params=TOY_GROUP)
    for state in run.clients.values():
        assert state.phase is Phase.DONE


# ---------------------------------------------------------------------------
# Transcript
# ---------------------------------------------------------------------------


def test_transcript_replay_byte_identical():
    inputs = random_inputs(4, 5, seed=13)
    a = run_secagg(inputs, k=3, seed=13, dropout_after={2: 2}, params=TOY_GROUP).to_jsonl()
    b = run_secagg(inputs, k=3, seed=13, dropout_after={2: 2}, params=TOY_GROUP).to_jsonl()
    assert a == b


def test_transcript_header_schema():
    t = run_secagg(random_inputs(2, 3, seed=14), k=2, seed=14, params=TOY_GROUP)
    lines = t.to_jsonl().splitlines()
    header = json.loads(lines[0])
    assert header["schema_version"] == TRANSCRIPT_SCHEMA_VERSION
    assert header["aborted"] is False
    assert header["included"] == [0, 1]
    # every message line parses and carries a type tag
    for line in lines[1:]:
        msg = json.loads(line)
        assert "type" in msg


def test_transcript_message_round_tags_monotone_per_sender():
    t = run_secagg(random_inputs(3, 3, seed=15), k=2, seed=15, params=TOY_GROUP)
    last_round = {}
    for line in t.to_jsonl().splitlines()[1:]:
        msg = json.loads(line)
        sender = msg.get("sender")
        rnd = msg.get("round")
        if sender is None or rnd is None:
            continue
        assert rnd >= last_round.get(sender, -1)
        last_round[sender] = rnd


def test_decoded_aggregate_matches_field_decode():
    inputs = random_inputs(3, 4, seed=16)
    t = run_secagg(inputs, k=2, seed=16, params=TOY_GROUP)
    assert np.array_equal(t.aggregate, decode_fixed(t.aggregate_field))


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def test_run_protocol_validation():
    with pytest.raises(ParameterError):
        run_secagg([[1.0]], k=1)
    with pytest.raises(ParameterError):
        run_secagg([[1.0], [2.0]], k=3)
    with pytest.raises(ParameterError):
        run_secagg([[1.0], [2.0]], k=0)
    with pytest.raises(ParameterError):
        run_secagg([[1.0, 2.0], [3.0]], k=2)
