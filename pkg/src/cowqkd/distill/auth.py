"""Wegman-Carter authentication with a pre-shared key pool.

The hash is polynomial evaluation over GF(p), p = 2**64 - 59, at a secret
point drawn once from the pool; every tag is then masked with 64 fresh pool
bits, so pool bits are never reused across tags.
"""
from __future__ import annotations

import hmac

import numpy as np

PRIME = (1 << 64) - 59
TAG_BITS = 64
_CHUNK = 7  # bytes per coefficient, always below the prime


class AuthPoolExhausted(RuntimeError):
    """Not enough fresh key bits left for another tag."""


class AuthKeyPool:
    def __init__(self, bits: np.ndarray):
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.ndim != 1 or np.any(bits > 1):
            raise ValueError("pool must be a 1-d array of bits")
        self._bits = bits
        self.cursor = 0
        self.tag_bits = TAG_BITS
        self._point: int | None = None

    @classmethod
    def from_seed(cls, seed: int, n_bits: int, label: int = 0) -> "AuthKeyPool":
        rng = np.random.default_rng([seed, label, 0xA17])
        return cls(rng.integers(0, 2, size=n_bits, dtype=np.uint8))

    @property
    def remaining(self) -> int:
        return int(self._bits.size - self.cursor)

    def take(self, n: int) -> int:
        """Consume ``n`` fresh bits and return them as an integer (MSB first)."""
        if n > self.remaining:
            raise AuthPoolExhausted(f"need {n} key bits, {self.remaining} left")
        chunk = self._bits[self.cursor: self.cursor + n]
        self.cursor += n
        return int.from_bytes(np.packbits(np.concatenate([np.zeros((-n) % 8, np.uint8), chunk])).tobytes(), "big")

    def _hash_point(self) -> int:
        if self._point is None:
            self._point = self.take(TAG_BITS) % PRIME
        return self._point

    def next_pad(self) -> tuple[int, int]:
        """(hash point, one-time pad); fails before consuming anything if short."""
        need = TAG_BITS + (TAG_BITS if self._point is None else 0)
        if need > self.remaining:
            raise AuthPoolExhausted(f"need {need} key bits, {self.remaining} left")
        point = self._hash_point()
        return point, self.take(TAG_BITS)


def poly_hash(message: bytes, point: int) -> int:
    """Polynomial hash of ``message`` at ``point``; the length is the last coefficient."""
    acc = 0
    for i in range(0, len(message), _CHUNK):
        coeff = int.from_bytes(message[i: i + _CHUNK], "little") + (1 << 56)
        acc = (acc * point + coeff) % PRIME
    return (acc * point + len(message)) % PRIME


def authenticate(message: bytes, pool: AuthKeyPool) -> bytes:
    point, pad = pool.next_pad()
    return (poly_hash(message, point) ^ pad).to_bytes(8, "little")


def verify(message: bytes, tag: bytes | None, pool: AuthKeyPool) -> bool:
    """Recompute the tag with the receiver's copy of the pool."""
    if tag is None or len(tag) != 8:
        pool.next_pad()
        return False
    return hmac.compare_digest(authenticate(message, pool), tag)
