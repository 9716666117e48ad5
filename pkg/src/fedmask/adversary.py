"""Malicious-server strategies executed against the aggregation protocol:
Sybil man-in-the-middle, share compromise, strategic dropping, and the
two-party algebraic solve.

Successful attacks recover honest clients' encoded weight vectors bit-exactly
(the comparisons are in field arithmetic, with no tolerance).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .crypto import (
    DhParams,
    RFC3526_2048,
    ShamirShare,
    ThresholdError,
    modexp,
    shamir_reconstruct,
)
from .numeric import (
    FieldVector,
    ParameterError,
    Rng,
    as_vector,
    clip_for_encoding,
    decode_fixed,
    encode_fixed,
    field_add,
    field_sub,
)
from .secagg import ProtocolRun, _decode_share, individual_mask, pairwise_mask, run_protocol

STRATEGIES = ("honest_but_curious", "sybil_mitm", "share_compromise", "strategic_drop")


@dataclass(frozen=True)
class AdversaryStrategy:
    kind: str
    sybil_count: int = 0
    controlled_ids: tuple = ()
    retry_limit: int = 10
    round_size: int | None = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ParameterError(f"unknown strategy {self.kind!r}")
        if self.retry_limit < 1:
            raise ParameterError("retry limit must be >= 1")
        if len(set(self.controlled_ids)) != len(self.controlled_ids):
            raise ParameterError("duplicate controlled ids")


@dataclass(frozen=True)
class AttackScenario:
    inputs: tuple  # ground-truth honest weight vectors, one per client id
    k: int
    seed: int = 0
    params: DhParams = RFC3526_2048
    frac_bits: int = 24
    trusted_third_party: bool = False  # third party certifies advertised keys


@dataclass
class AttackReport:
    strategy: AdversaryStrategy
    success: bool
    recovered: dict = field(default_factory=dict)  # honest id -> ParamVector
    recovered_field: dict = field(default_factory=dict)  # honest id -> FieldVector
    max_field_error: int | None = None  # max |recovered - truth| over field ints
    rounds_consumed: int = 0
    reason: str | None = None
    attempts: list = field(default_factory=list)  # per-attempt log entries

    def to_json(self) -> str:
        return json.dumps(
            {
                "strategy": self.strategy.kind,
                "success": self.success,
                "recovered": {str(i): [float(x) for x in v] for i, v in self.recovered.items()},
                "max_field_error": None if self.max_field_error is None else str(self.max_field_error),
                "rounds_consumed": self.rounds_consumed,
                "reason": self.reason,
                "attempts": self.attempts,
            }
        )


def _truth_field(scenario: AttackScenario, cid: int) -> FieldVector:
    return encode_fixed(clip_for_encoding(as_vector(scenario.inputs[cid])), scenario.frac_bits)


def _field_error(a: FieldVector, b: FieldVector) -> int:
    return int(np.max(np.abs(a.residues.astype(np.int64) - b.residues.astype(np.int64)), initial=0))


def _pooled_shares(run: ProtocolRun, holders, owner: int, key: str) -> list[ShamirShare]:
    shares = []
    for hid in holders:
        bundle = run.clients[hid].held_bundles.get(owner)
        if bundle is None or hid == owner:
            continue
        shares.append(_decode_share(json.loads(bundle)[key]))
    return shares


def _unmask_input(run: ProtocolRun, frac_bits: int, cid: int, sk2: int, pair_secrets: dict) -> FieldVector:
    """encode(w_cid) = c_cid - M2 - sum_j sign(cid, j) * M_{cid,j}."""
    c = run.server.masked[cid]
    dim = c.dim
    c = field_sub(c, individual_mask(sk2, dim, frac_bits))
    for j, secret in pair_secrets.items():
        m = pairwise_mask(secret, dim, frac_bits)
        c = field_sub(c, m) if cid < j else field_add(c, m)
    return c


def _cell_seed(seed: int, cell: int) -> int:
    return (seed * 0x9E3779B97F4A7C15 + cell + 1) % (1 << 64)


def run_mitm(scenario: AttackScenario, strategy: AdversaryStrategy) -> AttackReport:
    """Sybil man-in-the-middle: each honest client is isolated in a round cell
    whose other participants are all server-controlled identities, so every
    pairwise secret and enough key shares are known to the server."""
    report = AttackReport(strategy=strategy, success=False)
    if scenario.trusted_third_party:
        report.reason = "third party certifies keys; sybil identities rejected"
        return report
    s = strategy.sybil_count
    if s < 1:
        report.reason = "no sybil identities available"
        return report
    if scenario.k > s:
        report.reason = "threshold exceeds sybil count; not enough shares observable"
        return report
    max_err = 0
    for cell, w in enumerate(scenario.inputs):
        # honest client is id 0; ids 1..s are sybils running the genuine logic
        inputs = [as_vector(w)] + [np.zeros(np.asarray(w).shape[0])] * s
        run = run_protocol(
            inputs, scenario.k, seed=_cell_seed(scenario.seed, cell), params=scenario.params, frac_bits=scenario.frac_bits
        )
        report.rounds_consumed += 1
        if run.transcript.aborted:
            report.reason = f"protocol aborted: {run.transcript.abort_reason}"
            return report
        sybils = range(1, s + 1)
        sk2 = shamir_reconstruct(_pooled_shares(run, sybils, 0, "sk2"))
        pair_secrets = {j: run.clients[j].pair_secrets[0] for j in sybils}
        rec = _unmask_input(run, scenario.frac_bits, 0, sk2, pair_secrets)
        report.recovered_field[cell] = rec
        report.recovered[cell] = decode_fixed(rec)
        max_err = max(max_err, _field_error(rec, _truth_field(scenario, cell)))
    report.max_field_error = max_err
    report.success = max_err == 0
    return report


def run_share_compromise(
    scenario: AttackScenario, strategy: AdversaryStrategy, run: ProtocolRun | None = None
) -> AttackReport:
    """Controlled clients pool the key shares they received; with at least k
    of them the server reconstructs every honest client's keys and unmasks."""
    report = AttackReport(strategy=strategy, success=False)
    controlled = tuple(sorted(strategy.controlled_ids))
    n = len(scenario.inputs)
    if any(not (0 <= c < n) for c in controlled):
        raise ParameterError("controlled id out of range")
    if run is None:
        run = run_protocol(
            list(scenario.inputs), scenario.k, seed=scenario.seed, params=scenario.params, frac_bits=scenario.frac_bits
        )
    report.rounds_consumed = 1
    if run.transcript.aborted:
        report.reason = f"protocol aborted: {run.transcript.abort_reason}"
        return report
    honest = [i for i in run.server.u3 if i not in controlled]
    max_err = 0
    for cid in honest:
        try:
            sk1 = shamir_reconstruct(_pooled_shares(run, controlled, cid, "sk1"))
            sk2 = shamir_reconstruct(_pooled_shares(run, controlled, cid, "sk2"))
        except ThresholdError:
            report.reason = (
                f"only {len(controlled)} controlled clients; {scenario.k} shares needed"
            )
            return report
        pair_secrets = {
            j: modexp(run.clients[j].kp1.pk, sk1, scenario.params.prime)
            for j in run.clients[cid].participants
            if j != cid
        }
        rec = _unmask_input(run, scenario.frac_bits, cid, sk2, pair_secrets)
        report.recovered_field[cid] = rec
        report.recovered[cid] = decode_fixed(rec)
        max_err = max(max_err, _field_error(rec, _truth_field(scenario, cid)))
    report.max_field_error = max_err
    report.success = bool(honest) and max_err == 0
    if not honest:
        report.success = True
        report.reason = "no honest participants; round pretended complete"
    return report


def run_strategic_drop(scenario: AttackScenario, strategy: AdversaryStrategy) -> AttackReport:
    """A third party selects round participants; the server retries rounds
    until the controlled clients alone meet the share threshold, then falsely
    declares honest clients dropped and proceeds as share compromise."""
    report = AttackReport(strategy=strategy, success=False)
    population = len(scenario.inputs)
    controlled = set(strategy.controlled_ids)
    round_size = strategy.round_size or max(scenario.k, population // 2)
    if round_size > population:
        raise ParameterError("round size exceeds population")
    selector = Rng(scenario.seed).child("third-party")
    for attempt in range(strategy.retry_limit):
        selected = tuple(sorted(int(i) for i in selector.choice(population, round_size)))
        picked_controlled = [i for i in selected if i in controlled]
        entry = {"attempt": attempt, "selected": list(selected), "controlled": len(picked_controlled)}
        if len(picked_controlled) == len(selected):
            entry["outcome"] = "round pretended complete"
            report.attempts.append(entry)
            report.success = True
            report.reason = "round pretended complete"
            report.rounds_consumed = attempt + 1
            return report
        if len(picked_controlled) >= scenario.k:
            sub = AttackScenario(
                inputs=tuple(scenario.inputs[i] for i in selected),
                k=scenario.k,
                seed=_cell_seed(scenario.seed, attempt),
                params=scenario.params,
                frac_bits=scenario.frac_bits,
            )
            remap = {orig: pos for pos, orig in enumerate(selected)}
            sub_strategy = AdversaryStrategy(
                kind="share_compromise",
                controlled_ids=tuple(remap[i] for i in picked_controlled),
            )
            inner = run_share_compromise(sub, sub_strategy)
            entry["outcome"] = "share compromise" if inner.success else "inner attack failed"
            report.attempts.append(entry)
            if inner.success:
                back = {orig: pos for pos, orig in remap.items()}
                report.recovered = {back[i]: v for i, v in inner.recovered.items()}
                report.recovered_field = {back[i]: v for i, v in inner.recovered_field.items()}
                report.max_field_error = inner.max_field_error
                report.success = True
                report.rounds_consumed = attempt + 1
                return report
        else:
            entry["outcome"] = "round discarded"
            report.attempts.append(entry)
    report.rounds_consumed = strategy.retry_limit
    report.reason = "retry limit exhausted"
    return report


def run_attack(scenario: AttackScenario, strategy: AdversaryStrategy) -> AttackReport:
    if strategy.kind == "sybil_mitm":
        return run_mitm(scenario, strategy)
    if strategy.kind == "share_compromise":
        return run_share_compromise(scenario, strategy)
    if strategy.kind == "strategic_drop":
        return run_strategic_drop(scenario, strategy)
    # honest-but-curious: observe the protocol, recover nothing
    run_protocol(list(scenario.inputs), scenario.k, seed=scenario.seed, params=scenario.params, frac_bits=scenario.frac_bits)
    return AttackReport(strategy=strategy, success=False, rounds_consumed=1, reason="passive observation only")


# ---------------------------------------------------------------------------
# Two-party algebraic solve
# ---------------------------------------------------------------------------


def two_party_solve(aggregate_y, server_x2) -> np.ndarray:
    """With a 2-party mean y = (x1 + x2)/2, the server solves x1 = 2y - x2."""
    y = as_vector(aggregate_y)
    x2 = as_vector(server_x2)
    if y.shape != x2.shape:
        raise ParameterError("aggregate and server input dims differ")
    return 2.0 * y - x2


# ---------------------------------------------------------------------------
# Brute-force hiding oracles (toy fields)
# ---------------------------------------------------------------------------


def shamir_candidates(shares, prime: int) -> list[int]:
    """All secrets in [0, prime) consistent with the held shares.

    With fewer than threshold shares, a degree-(k-1) polynomial exists through
    (0, s) and every held point for EVERY candidate s, so the scan returns the
    whole field: the textbook hiding property, made explicit.
    """
    shares = list(shares)
    if not shares:
        return list(range(prime))
    k = shares[0].threshold
    candidates = []
    for s in range(prime):
        points = [(0, s)] + [(sh.index, sh.value) for sh in shares]
        if len(points) <= k or _points_on_low_degree_poly(points, k, prime):
            candidates.append(s)
    return candidates


def _points_on_low_degree_poly(points, k: int, prime: int) -> bool:
    """True if all points lie on the degree-(k-1) polynomial through the first k."""
    base = points[:k]
    for x, y in points[k:]:
        acc = 0
        for i, (xi, yi) in enumerate(base):
            num, den = 1, 1
            for j, (xj, _) in enumerate(base):
                if i == j:
                    continue
                num = (num * (x - xj)) % prime
                den = (den * (xi - xj)) % prime
            acc = (acc + yi * num * pow(den, -1, prime)) % prime
        if acc != y % prime:
            return False
    return True


def masked_value_candidates(observed: int, modulus: int) -> list[int]:
    """Inputs consistent with an observed one-time-masked residue: all of them."""
    return [x for x in range(modulus) if any((x + m) % modulus == observed for m in range(modulus))]
