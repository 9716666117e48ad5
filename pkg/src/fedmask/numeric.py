"""Parameter vectors, seeded randomness, uniform masks, and the fixed-point
prime-field codec shared by every other module.

Vectors are plain 1-D float64 numpy arrays ("param vectors").  Field vectors
carry fixed-point encodings modulo a prime so that protocol mask arithmetic
cancels exactly, with no floating-point drift.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

# Mersenne prime 2^61 - 1: fast reduction, and enough headroom above the
# 24-fractional-bit encoding for sums of ~10^4 values.
MERSENNE61 = (1 << 61) - 1

DEFAULT_FRAC_BITS = 24
DEFAULT_MAX_SUMMANDS = 10_000

# Weight values are clipped to this range before field encoding so that sums
# of up to DEFAULT_MAX_SUMMANDS encoded values never wrap around the modulus.
ENCODE_CLIP = 32.0


class ParameterError(ValueError):
    """Invalid argument to a numeric operation."""


class RangeError(ValueError):
    """Value too large for the fixed-point field encoding."""


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------


class Rng:
    """Deterministic counter-based random stream (Philox-4x64).

    A stream is identified by a 64-bit root seed plus a path of string tags.
    ``child(tag)`` derives an independent stream whose output depends only on
    (seed, path), so two protocol parties that agree on the path derive
    identical values.  Instances are single-owner: never share one across
    threads; split children instead.
    """

    def __init__(self, seed: int, _path: tuple[str, ...] = ()):
        if not (0 <= int(seed) < (1 << 64)):
            raise ParameterError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.path = _path
        key = _derive_key(self.seed, self.path)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, *tags) -> "Rng":
        """Derive an independent child stream addressed by string tags."""
        return Rng(self.seed, self.path + tuple(str(t) for t in tags))

    def uniform(self, low: float, high: float, size: int) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float, scale: float, size: int) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int, size: int | None = None):
        return self._gen.integers(low, high, size=size)

    def randbelow(self, bound: int) -> int:
        """Uniform big integer in [0, bound), for crypto-sized values."""
        if bound <= 0:
            raise ParameterError("bound must be positive")
        nbits = bound.bit_length()
        nwords = (nbits + 63) // 64
        while True:
            words = self._gen.integers(0, 1 << 64, size=nwords, dtype=np.uint64)
            value = 0
            for w in words:
                value = (value << 64) | int(w)
            value >>= nwords * 64 - nbits
            if value < bound:
                return value

    def shuffle(self, items: list) -> None:
        self._gen.shuffle(items)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def _derive_key(seed: int, path: tuple[str, ...]) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(seed.to_bytes(8, "little"))
    for tag in path:
        h.update(b"/")
        h.update(tag.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


# ---------------------------------------------------------------------------
# Param vectors
# ---------------------------------------------------------------------------


def as_vector(values) -> np.ndarray:
    """Validate and return a finite 1-D float64 vector."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ParameterError(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ParameterError("vector contains non-finite values")
    return v


def uniform_mask(dim: int, alpha: float, rng: Rng) -> np.ndarray:
    """I.i.d. uniform noise on [-alpha, alpha], deterministic given rng."""
    if dim < 1:
        raise ParameterError("dim must be >= 1")
    if not (0.0 <= alpha <= 1.0):
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        # uniform(0, 0) is ill-defined for numpy; the degenerate mask is zero
        return np.zeros(dim)
    return rng.uniform(-alpha, alpha, dim)


def vec_mean(vectors) -> np.ndarray:
    """Coordinate-wise arithmetic mean of same-dimension vectors."""
    vs = [as_vector(v) for v in vectors]
    if not vs:
        raise ParameterError("mean of empty sequence")
    dim = vs[0].shape[0]
    for i, v in enumerate(vs):
        if v.shape[0] != dim:
            raise ParameterError(f"vector {i} has dim {v.shape[0]}, expected {dim}")
    return np.mean(np.stack(vs), axis=0)


def vector_to_bytes(v: np.ndarray) -> bytes:
    """Little-endian binary layout: u32 dim, then dim float64 values."""
    v = as_vector(v)
    return struct.pack("<I", v.shape[0]) + v.astype("<f8").tobytes()


def vector_from_bytes(data: bytes) -> np.ndarray:
    (dim,) = struct.unpack_from("<I", data, 0)
    v = np.frombuffer(data, dtype="<f8", count=dim, offset=4)
    return as_vector(np.array(v))


# ---------------------------------------------------------------------------
# Fixed-point prime field
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FieldVector:
    """Residues modulo a prime, encoding fixed-point reals.

    residues: uint64 array, every entry in [0, p)
    modulus:  the prime p
    frac_bits: fractional bits of the fixed-point encoding
    """

    residues: np.ndarray
    modulus: int = MERSENNE61
    frac_bits: int = DEFAULT_FRAC_BITS

    def __post_init__(self):
        r = np.asarray(self.residues, dtype=np.uint64)
        if r.ndim != 1:
            raise ParameterError("residues must be 1-D")
        if np.any(r >= np.uint64(self.modulus)):
            raise ParameterError("residue out of range [0, p)")
        object.__setattr__(self, "residues", r)

    @property
    def dim(self) -> int:
        return self.residues.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, FieldVector)
            and self.modulus == other.modulus
            and self.frac_bits == other.frac_bits
            and np.array_equal(self.residues, other.residues)
        )


def _check_compat(a: FieldVector, b: FieldVector) -> None:
    if a.modulus != b.modulus or a.frac_bits != b.frac_bits:
        raise ParameterError("field vectors use different parameters")
    if a.dim != b.dim:
        raise ParameterError(f"dim mismatch: {a.dim} vs {b.dim}")


def field_add(a: FieldVector, b: FieldVector) -> FieldVector:
    _check_compat(a, b)
    p = np.uint64(a.modulus)
    # residues < 2^61, so the sum fits in uint64 without overflow
    return FieldVector((a.residues + b.residues) % p, a.modulus, a.frac_bits)


def field_sub(a: FieldVector, b: FieldVector) -> FieldVector:
    _check_compat(a, b)
    p = np.uint64(a.modulus)
    return FieldVector((a.residues + (p - b.residues) % p) % p, a.modulus, a.frac_bits)


def field_neg(a: FieldVector) -> FieldVector:
    p = np.uint64(a.modulus)
    return FieldVector((p - a.residues) % p, a.modulus, a.frac_bits)


def field_zero(dim: int, modulus: int = MERSENNE61, frac_bits: int = DEFAULT_FRAC_BITS) -> FieldVector:
    return FieldVector(np.zeros(dim, dtype=np.uint64), modulus, frac_bits)


def field_sum(vectors) -> FieldVector:
    vs = list(vectors)
    if not vs:
        raise ParameterError("sum of empty sequence")
    acc = vs[0]
    for v in vs[1:]:
        acc = field_add(acc, v)
    return acc


def encode_fixed(
    v: np.ndarray,
    frac_bits: int = DEFAULT_FRAC_BITS,
    modulus: int = MERSENNE61,
    max_summands: int = DEFAULT_MAX_SUMMANDS,
) -> FieldVector:
    """Encode reals as round(v * 2^f) mod p; negatives map to p - |.|.

    Raises RangeError if any |v_i| * 2^f reaches p / (2 * max_summands), the
    bound that guarantees sums of up to max_summands encoded values never
    wrap the modulus.
    """
    v = as_vector(v)
    scaled = np.rint(v * float(1 << frac_bits)).astype(np.int64)
    bound = modulus // (2 * max_summands)
    over = np.abs(scaled) >= bound
    if np.any(over):
        i = int(np.argmax(over))
        raise RangeError(f"coordinate {i} (value {v[i]}) overflows the field encoding")
    residues = np.where(scaled >= 0, scaled, modulus + scaled).astype(np.uint64)
    return FieldVector(residues, modulus, frac_bits)


def decode_fixed(fv: FieldVector) -> np.ndarray:
    """Inverse of encode_fixed up to quantization; residues > p/2 are negative."""
    half = fv.modulus // 2
    r = fv.residues.astype(object)
    signed = np.array([int(x) - fv.modulus if int(x) > half else int(x) for x in r], dtype=np.float64)
    return signed / float(1 << fv.frac_bits)


def clip_for_encoding(v: np.ndarray, limit: float = ENCODE_CLIP) -> np.ndarray:
    """Clip weights to the documented range before field encoding."""
    return np.clip(as_vector(v), -limit, limit)


def field_to_bytes(fv: FieldVector) -> bytes:
    """Little-endian layout: u64 p, u32 f, u32 dim, then dim u64 residues."""
    head = struct.pack("<QII", fv.modulus, fv.frac_bits, fv.dim)
    return head + fv.residues.astype("<u8").tobytes()


def field_from_bytes(data: bytes) -> FieldVector:
    modulus, frac_bits, dim = struct.unpack_from("<QII", data, 0)
    residues = np.frombuffer(data, dtype="<u8", count=dim, offset=16)
    return FieldVector(np.array(residues), modulus, frac_bits)


def field_debug_json(fv: FieldVector) -> str:
    """JSON debug form with residues as decimal strings."""
    return json.dumps(
        {
            "modulus": str(fv.modulus),
            "frac_bits": fv.frac_bits,
            "residues": [str(int(r)) for r in fv.residues],
        }
    )
