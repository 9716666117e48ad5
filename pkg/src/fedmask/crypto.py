"""Modular-arithmetic primitives for the aggregation protocol: Diffie-Hellman,
Shamir threshold sharing, PRG mask expansion, Schnorr signatures, and an RSA
multiplicative-homomorphism demonstration.

Everything here is simulation-grade.  No constant-time guarantees, no side
channel resistance, and key sizes are chosen for determinism and speed, not
security.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .numeric import FieldVector, MERSENNE61, ParameterError, Rng

try:  # optional fast big-int backend
    from gmpy2 import powmod as _powmod
except ImportError:  # pragma: no cover - depends on environment
    _powmod = pow

# Prime used for Shamir sharing; identical to the mask field so mask seeds
# and secret keys are shareable directly.
SHARING_PRIME = MERSENNE61

# Secret exponents are sampled below 2^61 - 1 so they can be Shamir-shared in
# the same field.  Exponentiation stays cheap even in the 2048-bit group.
MAX_SECRET_EXPONENT = MERSENNE61


class ProtocolError(ValueError):
    """Peer-supplied value violates protocol preconditions."""


class ThresholdError(ValueError):
    """Not enough shares to reconstruct a secret."""


# ---------------------------------------------------------------------------
# Modular exponentiation and Diffie-Hellman
# ---------------------------------------------------------------------------


def modexp(base: int, exp: int, modulus: int) -> int:
    """Square-and-multiply base^exp mod modulus.

    Moduli beyond 64 bits delegate to the interpreter's C implementation of
    the same windowed square-and-multiply; the explicit loop below is the
    reference, exercised directly by small-modulus tests.
    """
    if modulus < 2:
        raise ParameterError("modulus must be >= 2")
    if exp < 0:
        raise ParameterError("exponent must be >= 0")
    if modulus.bit_length() > 64:
        return int(_powmod(base, exp, modulus))
    result = 1
    base %= modulus
    while exp:
        if exp & 1:
            result = (result * base) % modulus
        base = (base * base) % modulus
        exp >>= 1
    return result


@dataclass(frozen=True)
class DhParams:
    prime: int
    generator: int

    def __post_init__(self):
        if not (1 < self.generator < self.prime):
            raise ParameterError("generator must lie in (1, p)")


# RFC 3526 group 14 (2048-bit MODP), the default group.
RFC3526_2048 = DhParams(
    prime=int(
        "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD1"
        "29024E088A67CC74020BBEA63B139B22514A08798E3404DD"
        "EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245"
        "E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
        "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3D"
        "C2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F"
        "83655D23DCA3AD961C62F356208552BB9ED529077096966D"
        "670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
        "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9"
        "DE2BCBF6955817183995497CEA956AE515D2261898FA0510"
        "15728E5A8AACAA68FFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFF",
        16,
    ),
    generator=2,
)

# 23-bit toy group for fast exhaustive tests (p prime, 5 is a generator).
TOY_GROUP = DhParams(prime=8_380_417, generator=5)


@dataclass(frozen=True)
class KeyPair:
    sk: int
    pk: int

    def __post_init__(self):
        if self.sk < 1:
            raise ParameterError("secret key must be >= 1")


def generate_keypair(params: DhParams, rng: Rng) -> KeyPair:
    bound = min(params.prime - 2, MAX_SECRET_EXPONENT)
    sk = 1 + rng.randbelow(bound - 1)
    return KeyPair(sk=sk, pk=modexp(params.generator, sk, params.prime))


def dh_shared_secret(my: KeyPair, their_pk: int, params: DhParams) -> int:
    """Symmetric shared secret pk_j^sk_i = g^(sk_i * sk_j) mod p."""
    if not (1 < their_pk < params.prime):
        raise ProtocolError(f"public key {their_pk} out of range")
    return modexp(their_pk, my.sk, params.prime)


def seed_from_secret(secret: int, label: str = "mask") -> int:
    """Derive a sharing-field seed from a shared secret's canonical bytes."""
    data = label.encode() + b"|" + _canonical_bytes(secret)
    digest = hashlib.sha256(data).digest()
    return int.from_bytes(digest, "big") % SHARING_PRIME


def _canonical_bytes(value: int) -> bytes:
    if value < 0:
        raise ParameterError("negative value has no canonical encoding")
    length = max(1, (value.bit_length() + 7) // 8)
    return value.to_bytes(length, "big")


# ---------------------------------------------------------------------------
# Shamir secret sharing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShamirShare:
    index: int
    value: int
    threshold: int
    total: int
    prime: int = SHARING_PRIME

    def __post_init__(self):
        if not (1 <= self.index <= self.total):
            raise ParameterError("share index out of range")
        if self.threshold > self.total:
            raise ParameterError("threshold exceeds share count")


def shamir_split(secret: int, k: int, n: int, rng: Rng, prime: int = SHARING_PRIME) -> list[ShamirShare]:
    """Evaluate a random degree-(k-1) polynomial with rho(0)=secret at 1..n."""
    if not (1 <= k <= n):
        raise ParameterError(f"need 1 <= k <= n, got k={k}, n={n}")
    if n >= prime:
        raise ParameterError("share count must be below the sharing prime")
    secret %= prime
    coeffs = [secret] + [rng.randbelow(prime) for _ in range(k - 1)]
    shares = []
    for x in range(1, n + 1):
        y = 0
        for c in reversed(coeffs):
            y = (y * x + c) % prime
        shares.append(ShamirShare(index=x, value=y, threshold=k, total=n, prime=prime))
    return shares


def shamir_reconstruct(shares) -> int:
    """Lagrange interpolation at 0 over at least k distinct-index shares."""
    shares = list(shares)
    if not shares:
        raise ThresholdError("no shares given")
    k = shares[0].threshold
    prime = shares[0].prime
    indices = [s.index for s in shares]
    if len(set(indices)) != len(indices):
        raise ParameterError("duplicate share indices")
    if len(shares) < k:
        raise ThresholdError(f"need {k} shares, got {len(shares)}")
    shares = shares[:k] if len(shares) > k else shares
    secret = 0
    for i, si in enumerate(shares):
        num, den = 1, 1
        for j, sj in enumerate(shares):
            if i == j:
                continue
            num = (num * (-sj.index)) % prime
            den = (den * (si.index - sj.index)) % prime
        lagrange = num * pow(den, -1, prime) % prime
        secret = (secret + si.value * lagrange) % prime
    return secret


# ---------------------------------------------------------------------------
# PRG expansion and stream encryption
# ---------------------------------------------------------------------------


def prg_expand(seed: int, dim: int, modulus: int = MERSENNE61, frac_bits: int = 24) -> FieldVector:
    """Deterministically expand a seed into dim field elements.

    SHA-256 in counter mode over the seed's canonical byte encoding; both
    protocol parties holding the same seed derive the identical vector.
    """
    if dim < 1:
        raise ParameterError("dim must be >= 1")
    base = hashlib.sha256(b"prg|" + _canonical_bytes(seed)).digest()
    out = np.empty(dim, dtype=np.uint64)
    produced = 0
    counter = 0
    while produced < dim:
        block = hashlib.sha256(base + counter.to_bytes(8, "big")).digest()
        for off in range(0, 32, 8):
            if produced >= dim:
                break
            word = int.from_bytes(block[off : off + 8], "big")
            out[produced] = word % modulus
            produced += 1
        counter += 1
    return FieldVector(out, modulus, frac_bits)


def stream_xor(key_seed: int, data: bytes) -> bytes:
    """XOR data with a SHA-256 counter-mode keystream derived from key_seed."""
    base = hashlib.sha256(b"stream|" + _canonical_bytes(key_seed)).digest()
    out = bytearray(len(data))
    counter = 0
    pos = 0
    while pos < len(data):
        block = hashlib.sha256(base + counter.to_bytes(8, "big")).digest()
        chunk = min(32, len(data) - pos)
        for i in range(chunk):
            out[pos + i] = data[pos + i] ^ block[i]
        pos += chunk
        counter += 1
    return bytes(out)


# ---------------------------------------------------------------------------
# Schnorr signatures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Signature:
    commitment: int  # r = g^nonce mod p
    response: int  # s = nonce + e * sk, over the integers


def _challenge(commitment: int, message: bytes) -> int:
    # 64-bit truncated challenge keeps verification exponents small
    digest = hashlib.sha256(_canonical_bytes(commitment) + b"|" + message).digest()
    return int.from_bytes(digest[:8], "big")


def sign(message: bytes, sk: int, params: DhParams) -> Signature:
    # Deterministic nonce from (sk, message): no RNG needed, reproducible runs
    nonce_src = hashlib.sha256(b"nonce|" + _canonical_bytes(sk) + b"|" + message).digest()
    nonce = int.from_bytes(nonce_src, "big") % MAX_SECRET_EXPONENT + 1
    commitment = modexp(params.generator, nonce, params.prime)
    e = _challenge(commitment, message)
    return Signature(commitment=commitment, response=nonce + e * sk)


def verify(message: bytes, sig: Signature, pk: int, params: DhParams) -> bool:
    try:
        if not (0 < sig.commitment < params.prime) or sig.response < 0:
            return False
        # every client checks the same broadcast signatures, so cache by value
        return _verify_cached(message, sig.commitment, sig.response, pk, params.prime, params.generator)
    except (ParameterError, AttributeError, TypeError):
        return False


@lru_cache(maxsize=4096)
def _verify_cached(message: bytes, commitment: int, response: int, pk: int, prime: int, generator: int) -> bool:
    e = _challenge(commitment, message)
    lhs = modexp(generator, response, prime)
    rhs = (commitment * modexp(pk, e, prime)) % prime
    return lhs == rhs


# ---------------------------------------------------------------------------
# RSA homomorphism demonstration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RsaKeys:
    n: int
    e: int
    d: int


def rsa_keys_from_primes(p: int, q: int, e: int) -> RsaKeys:
    n = p * q
    lam = _lcm(p - 1, q - 1)
    d = pow(e, -1, lam)
    return RsaKeys(n=n, e=e, d=d)


def _lcm(a: int, b: int) -> int:
    import math

    return a * b // math.gcd(a, b)


def rsa_encrypt(m: int, keys: RsaKeys) -> int:
    return modexp(m, keys.e, keys.n)


def rsa_decrypt(c: int, keys: RsaKeys) -> int:
    return modexp(c, keys.d, keys.n)


@dataclass(frozen=True)
class HomomorphismRecord:
    lhs: int  # enc(m1) * enc(m2) mod n
    rhs: int  # enc(m1 * m2)
    equal: bool


def rsa_homomorphism_demo(m1: int, m2: int, keys: RsaKeys) -> HomomorphismRecord:
    """enc(m1) * enc(m2) == enc(m1 * m2) mod n: multiplicative homomorphism."""
    if m1 * m2 >= keys.n:
        raise ParameterError("message product overflows the RSA modulus")
    lhs = (rsa_encrypt(m1, keys) * rsa_encrypt(m2, keys)) % keys.n
    rhs = rsa_encrypt(m1 * m2, keys)
    return HomomorphismRecord(lhs=lhs, rhs=rhs, equal=lhs == rhs)
