"""Five-round secure-aggregation protocol as explicit client/server state
machines over an in-process message transport.

Rounds: key advertising (0), key sharing (1), masked input collection (2),
consistency check (3), unmasking (4).  Dropouts follow a declarative schedule
(client i stops responding after round r); there are no wall-clock timers, so
every run is deterministic given its seed.

Mask sign convention: for a client pair (i, j) with i < j the commonly
derived pairwise mask is added by i and subtracted by j.  Each client also
adds an individual mask M2 derived from its second secret key; survivors
reveal Shamir shares of sk2 so the server can remove M2, while shares of sk1
are revealed only for dropped clients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .crypto import (
    DhParams,
    KeyPair,
    RFC3526_2048,
    ShamirShare,
    SHARING_PRIME,
    dh_shared_secret,
    generate_keypair,
    modexp,
    prg_expand,
    seed_from_secret,
    shamir_reconstruct,
    shamir_split,
    sign,
    stream_xor,
    verify,
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
    field_zero,
)

TRANSCRIPT_SCHEMA_VERSION = 1

SERVER = "server"


class Phase(Enum):
    ADVERTISE = 0
    SHARE_KEYS = 1
    MASKED_INPUT = 2
    CONSISTENCY = 3
    UNMASK = 4
    DONE = 5
    ABORTED = 6


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KeyAdvert:
    sender: int
    pk1: int
    pk2: int
    sig: object
    round: int = 0


@dataclass(frozen=True)
class RosterBroadcast:
    roster: tuple  # tuple of (id, pk1, pk2, sig)
    sender: str = SERVER
    round: int = 0


@dataclass(frozen=True)
class KeyShares:
    sender: int
    bundles: dict  # recipient id -> encrypted bytes
    round: int = 1


@dataclass(frozen=True)
class ShareDelivery:
    participants: tuple  # ids that completed key sharing (U2)
    bundles: tuple  # (owner id, encrypted bytes) addressed to the recipient
    sender: str = SERVER
    round: int = 1


@dataclass(frozen=True)
class MaskedInput:
    sender: int
    masked: FieldVector
    round: int = 2


@dataclass(frozen=True)
class SurvivorBroadcast:
    survivors: tuple  # ids whose masked input arrived (U3)
    sender: str = SERVER
    round: int = 2


@dataclass(frozen=True)
class ConsistencySig:
    sender: int
    participants: tuple
    sig: object
    round: int = 3


@dataclass(frozen=True)
class UnmaskRequest:
    sigs: tuple  # (id, sig) over the survivor list
    dropped: tuple  # U2 \ U3: reveal sk1 shares
    survivors: tuple  # U3: reveal sk2 shares
    sender: str = SERVER
    round: int = 3


@dataclass(frozen=True)
class UnmaskShares:
    sender: int
    sk1_shares: dict  # owner id -> ShamirShare
    sk2_shares: dict  # owner id -> ShamirShare
    round: int = 4


def advert_signing_bytes(cid: int, pk1: int, pk2: int) -> bytes:
    return f"advert|{cid}|{pk1}|{pk2}".encode()


def roster_signing_bytes(ids) -> bytes:
    return ("roster|" + ",".join(str(i) for i in sorted(ids))).encode()


# ---------------------------------------------------------------------------
# Client state machine
# ---------------------------------------------------------------------------


@dataclass
class ClientState:
    cid: int
    weights: np.ndarray
    k: int
    params: DhParams
    rng: Rng
    frac_bits: int = 24
    phase: Phase = Phase.ADVERTISE
    kp1: KeyPair | None = None
    kp2: KeyPair | None = None
    roster: dict = field(default_factory=dict)  # id -> (pk1, pk2)
    participants: tuple = ()  # U2, mask peers
    pair_secrets: dict = field(default_factory=dict)  # id -> s_ij (keypair 1)
    enc_secrets: dict = field(default_factory=dict)  # id -> s2_ij (keypair 2)
    held_bundles: dict = field(default_factory=dict)  # owner id -> blob
    own_shares: dict = field(default_factory=dict)  # "sk1"/"sk2" -> own ShamirShare
    consistency_list: tuple = ()
    abort_reason: str | None = None

    def abort(self, reason: str):
        self.phase = Phase.ABORTED
        self.abort_reason = reason


def _share_index(ids, cid: int) -> int:
    return sorted(ids).index(cid) + 1


def _bundle_key(state: ClientState, peer: int) -> int:
    return seed_from_secret(state.enc_secrets[peer], label="share-enc")


def _encode_share(share: ShamirShare) -> dict:
    return {
        "index": share.index,
        "value": str(share.value),
        "threshold": share.threshold,
        "total": share.total,
        "prime": str(share.prime),
    }


def _decode_share(d: dict) -> ShamirShare:
    return ShamirShare(
        index=d["index"],
        value=int(d["value"]),
        threshold=d["threshold"],
        total=d["total"],
        prime=int(d["prime"]),
    )


def pairwise_mask(secret: int, dim: int, frac_bits: int) -> FieldVector:
    return prg_expand(seed_from_secret(secret, label="mask"), dim, frac_bits=frac_bits)


def individual_mask(sk2: int, dim: int, frac_bits: int) -> FieldVector:
    return prg_expand(seed_from_secret(sk2, label="m2"), dim, frac_bits=frac_bits)


def masked_input_vector(state: ClientState) -> FieldVector:
    """encode(w_i) + M2 + sum_{j>i} M_ij - sum_{j<i} M_ij in field arithmetic."""
    dim = state.weights.shape[0]
    c = encode_fixed(clip_for_encoding(state.weights), state.frac_bits)
    c = field_add(c, individual_mask(state.kp2.sk, dim, state.frac_bits))
    for j in state.participants:
        if j == state.cid:
            continue
        m = pairwise_mask(state.pair_secrets[j], dim, state.frac_bits)
        c = field_add(c, m) if state.cid < j else field_sub(c, m)
    return c


def client_step(state: ClientState, inbox) -> tuple[ClientState, list]:
    """Advance one protocol round; returns the state and outgoing messages."""
    if state.phase in (Phase.DONE, Phase.ABORTED):
        return state, []
    handler = {
        Phase.ADVERTISE: _client_advertise,
        Phase.SHARE_KEYS: _client_share_keys,
        Phase.MASKED_INPUT: _client_masked_input,
        Phase.CONSISTENCY: _client_consistency,
        Phase.UNMASK: _client_unmask,
    }[state.phase]
    return handler(state, inbox)


def _client_advertise(state: ClientState, inbox) -> tuple[ClientState, list]:
    state.kp1 = generate_keypair(state.params, state.rng.child("kp1"))
    state.kp2 = generate_keypair(state.params, state.rng.child("kp2"))
    sig = sign(advert_signing_bytes(state.cid, state.kp1.pk, state.kp2.pk), state.kp1.sk, state.params)
    state.phase = Phase.SHARE_KEYS
    return state, [KeyAdvert(sender=state.cid, pk1=state.kp1.pk, pk2=state.kp2.pk, sig=sig)]


def _client_share_keys(state: ClientState, inbox) -> tuple[ClientState, list]:
    (msg,) = [m for m in inbox if isinstance(m, RosterBroadcast)]
    for cid, pk1, pk2, sig in msg.roster:
        if cid == state.cid:
            continue
        if not verify(advert_signing_bytes(cid, pk1, pk2), sig, pk1, state.params):
            state.abort(f"bad keypair signature from client {cid}")
            return state, []
        state.roster[cid] = (pk1, pk2)
        state.pair_secrets[cid] = dh_shared_secret(state.kp1, pk1, state.params)
        state.enc_secrets[cid] = dh_shared_secret(state.kp2, pk2, state.params)
    ids = sorted([e[0] for e in msg.roster])
    if len(ids) < state.k:
        state.abort("below threshold at key sharing")
        return state, []
    n = len(ids)
    sk1_shares = shamir_split(state.kp1.sk, state.k, n, state.rng.child("shamir-sk1"))
    sk2_shares = shamir_split(state.kp2.sk, state.k, n, state.rng.child("shamir-sk2"))
    bundles = {}
    for peer in ids:
        idx = _share_index(ids, peer) - 1
        payload = json.dumps(
            {
                "owner": state.cid,
                "sk1": _encode_share(sk1_shares[idx]),
                "sk2": _encode_share(sk2_shares[idx]),
            }
        ).encode()
        if peer == state.cid:
            state.held_bundles[state.cid] = payload  # own share, kept locally
            state.own_shares = {"sk1": sk1_shares[idx], "sk2": sk2_shares[idx]}
        else:
            bundles[peer] = stream_xor(_bundle_key(state, peer), payload)
    state.phase = Phase.MASKED_INPUT
    return state, [KeyShares(sender=state.cid, bundles=bundles)]


def _client_masked_input(state: ClientState, inbox) -> tuple[ClientState, list]:
    (msg,) = [m for m in inbox if isinstance(m, ShareDelivery)]
    state.participants = tuple(sorted(msg.participants))
    for owner, blob in msg.bundles:
        state.held_bundles[owner] = stream_xor(_bundle_key(state, owner), blob)
    if len(state.participants) < state.k:
        state.abort("below threshold at masked input")
        return state, []
    c = masked_input_vector(state)
    state.phase = Phase.CONSISTENCY
    return state, [MaskedInput(sender=state.cid, masked=c)]


def _client_consistency(state: ClientState, inbox) -> tuple[ClientState, list]:
    (msg,) = [m for m in inbox if isinstance(m, SurvivorBroadcast)]
    survivors = tuple(sorted(msg.survivors))
    if len(survivors) < state.k:
        state.abort("below threshold at consistency check")
        return state, []
    state.consistency_list = survivors
    sig = sign(roster_signing_bytes(survivors), state.kp1.sk, state.params)
    state.phase = Phase.UNMASK
    return state, [ConsistencySig(sender=state.cid, participants=survivors, sig=sig)]


def _client_unmask(state: ClientState, inbox) -> tuple[ClientState, list]:
    (msg,) = [m for m in inbox if isinstance(m, UnmaskRequest)]
    if set(msg.dropped) & set(msg.survivors):
        state.abort("server requested both masks for one client")
        return state, []
    expected = roster_signing_bytes(state.consistency_list)
    for cid, sig in msg.sigs:
        if cid == state.cid:
            continue
        pk1 = state.roster.get(cid, (None, None))[0]
        if pk1 is None or not verify(expected, sig, pk1, state.params):
            state.abort(f"bad consistency signature from client {cid}")
            return state, []
    sk1_shares, sk2_shares = {}, {}
    for j in msg.dropped:
        if j in state.held_bundles and j != state.cid:
            info = json.loads(state.held_bundles[j])
            sk1_shares[j] = _decode_share(info["sk1"])
    for i in msg.survivors:
        if i in state.held_bundles:
            info = json.loads(state.held_bundles[i])
            sk2_shares[i] = _decode_share(info["sk2"])
    state.phase = Phase.DONE
    return state, [UnmaskShares(sender=state.cid, sk1_shares=sk1_shares, sk2_shares=sk2_shares)]


# ---------------------------------------------------------------------------
# Server state machine
# ---------------------------------------------------------------------------


@dataclass
class ServerState:
    k: int
    dim: int
    frac_bits: int = 24
    round: int = 0
    adverts: dict = field(default_factory=dict)  # id -> KeyAdvert
    share_msgs: dict = field(default_factory=dict)  # id -> KeyShares
    masked: dict = field(default_factory=dict)  # id -> FieldVector
    consistency: dict = field(default_factory=dict)  # id -> ConsistencySig
    unmask: dict = field(default_factory=dict)  # id -> UnmaskShares
    aborted: bool = False
    abort_reason: str | None = None
    aggregate_field: FieldVector | None = None

    @property
    def u1(self):
        return tuple(sorted(self.adverts))

    @property
    def u2(self):
        return tuple(sorted(self.share_msgs))

    @property
    def u3(self):
        return tuple(sorted(self.masked))


def server_step(state: ServerState, inbox) -> tuple[ServerState, dict]:
    """Consume one round's client messages; returns per-client outboxes.

    The special key ``secagg.SERVER`` maps to broadcast messages sent to every
    active client.
    """
    handler = [
        _server_after_advertise,
        _server_after_shares,
        _server_after_masked,
        _server_after_consistency,
        _server_after_unmask,
    ][state.round]
    out = handler(state, inbox)
    state.round += 1
    return state, out


def _server_after_advertise(state: ServerState, inbox) -> dict:
    for m in inbox:
        state.adverts[m.sender] = m
    roster = tuple((m.sender, m.pk1, m.pk2, m.sig) for m in (state.adverts[i] for i in state.u1))
    return {SERVER: [RosterBroadcast(roster=roster)]}


def _server_after_shares(state: ServerState, inbox) -> dict:
    for m in inbox:
        state.share_msgs[m.sender] = m
    if len(state.u2) < state.k:
        state.aborted = True
        state.abort_reason = "below threshold: too few clients completed key sharing"
        return {}
    out = {}
    for recipient in state.u2:
        bundles = tuple(
            (owner, state.share_msgs[owner].bundles[recipient])
            for owner in state.u2
            if owner != recipient and recipient in state.share_msgs[owner].bundles
        )
        out[recipient] = [ShareDelivery(participants=state.u2, bundles=bundles)]
    return out


def _server_after_masked(state: ServerState, inbox) -> dict:
    for m in inbox:
        state.masked[m.sender] = m.masked
    return {SERVER: [SurvivorBroadcast(survivors=state.u3)]}


def _server_after_consistency(state: ServerState, inbox) -> dict:
    for m in inbox:
        state.consistency[m.sender] = m
    if len(state.consistency) < state.k:
        state.aborted = True
        state.abort_reason = "below threshold: too few consistency signatures"
        return {}
    sigs = tuple((cid, state.consistency[cid].sig) for cid in sorted(state.consistency))
    dropped = tuple(sorted(set(state.u2) - set(state.u3)))
    return {SERVER: [UnmaskRequest(sigs=sigs, dropped=dropped, survivors=state.u3)]}


def _server_after_unmask(state: ServerState, inbox) -> dict:
    for m in inbox:
        state.unmask[m.sender] = m
    if len(state.unmask) < state.k:
        state.aborted = True
        state.abort_reason = "below threshold: too few unmask responses"
        return {}
    state.aggregate_field = _server_unmask_aggregate(state)
    return {}


def _collect_shares(state: ServerState, owner: int, kind: str):
    shares = []
    seen = set()
    for m in state.unmask.values():
        pool = m.sk1_shares if kind == "sk1" else m.sk2_shares
        share = pool.get(owner)
        if share is not None and share.index not in seen:
            seen.add(share.index)
            shares.append(share)
    return shares


def _server_unmask_aggregate(state: ServerState) -> FieldVector:
    """Sum survivor inputs, strip M2 masks, cancel dropped clients' pairwise
    masks via reconstructed sk1 keys."""
    total = field_zero(state.dim, frac_bits=state.frac_bits)
    for cid in state.u3:
        total = field_add(total, state.masked[cid])
    # remove individual masks of included clients
    for cid in state.u3:
        sk2 = shamir_reconstruct(_collect_shares(state, cid, "sk2"))
        total = field_sub(total, individual_mask(sk2, state.dim, state.frac_bits))
    # cancel pairwise masks left dangling by clients dropped after key sharing
    dropped = sorted(set(state.u2) - set(state.u3))
    for j in dropped:
        sk1_j = shamir_reconstruct(_collect_shares(state, j, "sk1"))
        for i in state.u3:
            pk1_i = state.adverts[i].pk1
            secret = modexp(pk1_i, sk1_j, _params_of(state).prime)
            m = pairwise_mask(secret, state.dim, state.frac_bits)
            # client i applied sign(i, j); remove that contribution
            total = field_sub(total, m) if i < j else field_add(total, m)
    return total


_SERVER_PARAMS: dict[int, DhParams] = {}


def _params_of(state: ServerState) -> DhParams:
    return _SERVER_PARAMS.get(id(state), RFC3526_2048)


def set_server_params(state: ServerState, params: DhParams) -> None:
    _SERVER_PARAMS[id(state)] = params


# ---------------------------------------------------------------------------
# Round transcript and driver
# ---------------------------------------------------------------------------


@dataclass
class RoundTranscript:
    messages: list  # serialized message dicts, deterministic order
    dropouts: dict  # client id -> last round it responded in
    included: tuple  # client ids whose input entered the aggregate (U3)
    aggregate_field: FieldVector | None
    aggregate: np.ndarray | None
    aborted: bool
    abort_reason: str | None

    def to_jsonl(self) -> str:
        header = json.dumps(
            {
                "schema_version": TRANSCRIPT_SCHEMA_VERSION,
                "aborted": self.aborted,
                "abort_reason": self.abort_reason,
                "included": list(self.included),
                "dropouts": {str(k): v for k, v in self.dropouts.items()},
            }
        )
        return "\n".join([header] + [json.dumps(m) for m in self.messages])


def _serialize_value(v):
    if isinstance(v, FieldVector):
        return {"residues": [str(int(r)) for r in v.residues], "modulus": str(v.modulus), "frac_bits": v.frac_bits}
    if isinstance(v, ShamirShare):
        return _encode_share(v)
    if isinstance(v, bytes):
        return v.hex()
    if isinstance(v, dict):
        return {str(k): _serialize_value(x) for k, x in v.items()}
    if isinstance(v, (tuple, list)):
        return [_serialize_value(x) for x in v]
    if hasattr(v, "commitment"):  # Signature
        return {"commitment": str(v.commitment), "response": str(v.response)}
    if isinstance(v, (int, str, float)) or v is None:
        return str(v) if isinstance(v, int) and abs(v) > 2**53 else v
    return repr(v)


def serialize_message(msg) -> dict:
    data = {"type": type(msg).__name__}
    for name, value in vars(msg).items():
        data[name] = _serialize_value(value)
    return data


@dataclass
class ProtocolRun:
    """A completed round plus the final party states, for instrumentation."""

    transcript: RoundTranscript
    clients: dict  # id -> ClientState
    server: ServerState


def run_protocol(
    inputs,
    k: int,
    seed: int = 0,
    dropout_after: dict | None = None,
    params: DhParams = RFC3526_2048,
    frac_bits: int = 24,
) -> ProtocolRun:
    """Execute one full protocol round over the given client input vectors.

    dropout_after maps client id -> last protocol round (0-4) in which that
    client still responds.
    """
    inputs = [as_vector(v) for v in inputs]
    n = len(inputs)
    if n < 2:
        raise ParameterError("secure aggregation needs at least 2 clients")
    if not (1 <= k <= n):
        raise ParameterError(f"need 1 <= k <= n, got k={k}, n={n}")
    dim = inputs[0].shape[0]
    if any(v.shape[0] != dim for v in inputs):
        raise ParameterError("client inputs must share a dimension")
    dropout_after = dict(dropout_after or {})

    root = Rng(seed)
    clients = {
        cid: ClientState(cid=cid, weights=inputs[cid], k=k, params=params, rng=root.child("client", cid))
        for cid in range(n)
    }
    server = ServerState(k=k, dim=dim, frac_bits=frac_bits)
    set_server_params(server, params)

    log: list[dict] = []
    pending: dict[int, list] = {cid: [] for cid in clients}

    for round_no in range(5):
        round_msgs = []
        for cid in sorted(clients):
            state = clients[cid]
            if dropout_after.get(cid, 4) < round_no:
                continue
            if state.phase in (Phase.DONE, Phase.ABORTED):
                continue
            state, outbox = client_step(state, pending[cid])
            pending[cid] = []
            for m in outbox:
                log.append(serialize_message(m))
                round_msgs.append(m)
        server, outboxes = server_step(server, round_msgs)
        if server.aborted:
            break
        broadcast = outboxes.get(SERVER, [])
        for m in broadcast:
            log.append(serialize_message(m))
            for cid in clients:
                pending[cid].append(m)
        for cid, msgs in outboxes.items():
            if cid == SERVER:
                continue
            for m in msgs:
                log.append(serialize_message(m))
                pending[cid].append(m)

    aggregate_field = server.aggregate_field
    aggregate = decode_fixed(aggregate_field) if aggregate_field is not None else None
    transcript = RoundTranscript(
        messages=log,
        dropouts=dropout_after,
        included=server.u3 if not server.aborted else (),
        aggregate_field=aggregate_field,
        aggregate=aggregate,
        aborted=server.aborted,
        abort_reason=server.abort_reason,
    )
    return ProtocolRun(transcript=transcript, clients=clients, server=server)


def run_secagg(
    inputs,
    k: int,
    seed: int = 0,
    dropout_after: dict | None = None,
    params: DhParams = RFC3526_2048,
    frac_bits: int = 24,
) -> RoundTranscript:
    """run_protocol, returning only the transcript."""
    return run_protocol(inputs, k, seed, dropout_after, params, frac_bits).transcript
