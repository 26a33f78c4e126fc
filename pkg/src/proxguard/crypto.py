"""Cryptographic primitives for location updates and proximity requests.

Each user pair (user, buddy) shares a long-term 32-byte key.  From it a fresh
interval key is derived per update interval; an interval key encrypts or hashes
exactly one granule index, so ciphertexts from different intervals never share
key material.  Proximity requests additionally use a commutative cipher
(modular exponentiation in a fixed safe-prime group) so that the server can
re-blind a hashed location without learning it.
"""

from __future__ import annotations

import hashlib
import hmac
import math
import random
import secrets
import struct

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

try:
    from gmpy2 import powmod
except ImportError:  # pragma: no cover - gmpy2 is a declared dependency
    powmod = pow

SHARED_KEY_BYTES = 32
INDEX_WIDTH = 8  # granule indexes are encoded fixed-width before encryption
SESSION_KEY_BITS = 256

_INDEX = struct.Struct("!Q")
# interval keys are single-use (one payload per interval), so a fixed nonce is safe
_NONCE = bytes(12)


class AuthenticationError(Exception):
    """Payload failed authentication: wrong key or tampered ciphertext."""


def gen_shared_key(rng: random.Random | None = None) -> bytes:
    if rng is None:
        return secrets.token_bytes(SHARED_KEY_BYTES)
    return rng.randbytes(SHARED_KEY_BYTES)


def derive_interval_key(shared_key: bytes, interval: int) -> bytes:
    """Keystream with random access: PRF(shared_key, interval)."""
    if len(shared_key) != SHARED_KEY_BYTES:
        raise ValueError(f"shared key must be {SHARED_KEY_BYTES} bytes")
    if interval < 0:
        raise ValueError("interval must be non-negative")
    return hmac.new(shared_key, _INDEX.pack(interval), hashlib.sha256).digest()


def encrypt_index(interval_key: bytes, index: int) -> bytes:
    """Authenticated encryption of a granule index.

    The plaintext is fixed-width, so the ciphertext length does not depend on
    the index value.
    """
    if index < 0:
        raise ValueError("index must be non-negative")
    return ChaCha20Poly1305(interval_key).encrypt(_NONCE, _INDEX.pack(index), None)


def decrypt_index(interval_key: bytes, payload: bytes) -> int:
    try:
        plain = ChaCha20Poly1305(interval_key).decrypt(_NONCE, payload, None)
    except InvalidTag as exc:
        raise AuthenticationError("payload does not authenticate under this key") from exc
    return _INDEX.unpack(plain)[0]


def salted_hash(interval_key: bytes, index: int) -> bytes:
    """Keyed hash of a granule index; unforgeable without the interval key."""
    if index < 0:
        raise ValueError("index must be non-negative")
    return hmac.new(interval_key, _INDEX.pack(index), hashlib.sha256).digest()


class CommutativeGroup:
    """Commutative cipher
        C_k(x) = x^k mod p
    over a safe prime p, with session exponents coprime to p - 1 so that
    C_k1(C_k2(x)) == C_k2(C_k1(x)) and each C_k is a bijection on [2, p-2].
    """

    def __init__(self, prime: int):
        if prime < 7 or prime % 2 == 0:
            raise ValueError("prime must be an odd prime >= 7")
        self.prime = prime
        self.element_bytes = (prime.bit_length() + 7) // 8

    def contains(self, x: int) -> bool:
        return 2 <= x <= self.prime - 2

    def encrypt(self, key: int, x: int) -> int:
        if not self.contains(x):
            raise ValueError("element outside group range [2, p-2]")
        return int(powmod(x, key, self.prime))

    def digest_to_element(self, digest: bytes) -> int:
        """Map a hash digest into [2, p-2] (injective while 2^(8*len) < p - 3)."""
        return 2 + int.from_bytes(digest, "big") % (self.prime - 3)


# 2048-bit MODP group (RFC 3526, group 14); (p-1)/2 is prime.
_RFC3526_2048 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
    16,
)

DEFAULT_GROUP = CommutativeGroup(_RFC3526_2048)


def gen_session_key(
    group: CommutativeGroup = DEFAULT_GROUP,
    rng: random.Random | None = None,
    bits: int = SESSION_KEY_BITS,
) -> int:
    """Fresh commutative-cipher exponent with gcd(k, p-1) == 1.

    Exponents are drawn from [3, 2^bits) (odd, rejection sampled); short
    exponents keep request handling fast without affecting the bijection or
    commutativity properties.
    """
    bits = min(bits, group.prime.bit_length() - 2)
    draw = (lambda: secrets.randbits(bits)) if rng is None else (lambda: rng.getrandbits(bits))
    while True:
        k = draw() | 1
        if k >= 3 and math.gcd(k, group.prime - 1) == 1:
            return k


class KeyUsageLedger:
    """Test-mode ledger asserting each interval key protects one payload only."""

    def __init__(self) -> None:
        self._uses: dict[str, int] = {}

    def record(self, interval_key: bytes) -> None:
        fp = hashlib.sha256(interval_key).hexdigest()
        self._uses[fp] = self._uses.get(fp, 0) + 1

    @property
    def reused(self) -> list[str]:
        return sorted(fp for fp, n in self._uses.items() if n > 1)

    @property
    def recorded(self) -> int:
        return sum(self._uses.values())
