"""Cascade error correction.

Bob runs the correction; Alice only answers parity questions.  The
correcting side is a generator that yields requests and receives replies, so
the same code drives a local parity oracle or the classical channel:

* ``Shuffle(pass_index, seed)``: no reply; fixes the pass permutation.
* ``ParityQuery(ranges)``: reply is one parity bit per ``(pass, lo, hi)``
  range of the permuted key.
* ``VerifyQuery(point)``: reply is Alice's verification hash.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Generator, Sequence

import numpy as np

from .auth import poly_hash

log = logging.getLogger(__name__)

N_PASSES = 4
VERIFY_BITS = 50
_VERIFY_MASK = (1 << VERIFY_BITS) - 1


@dataclass(frozen=True)
class Shuffle:
    pass_index: int
    seed: int


@dataclass(frozen=True)
class ParityQuery:
    ranges: tuple[tuple[int, int, int], ...]


@dataclass(frozen=True)
class VerifyQuery:
    point: int


@dataclass
class CascadeResult:
    bits: np.ndarray
    leak_ec: int
    verified: bool
    errors_corrected: int
    rounds: int
    parity_bits: int
    block_sizes: list[int] = field(default_factory=list)

    @property
    def qber(self) -> float:
        return self.errors_corrected / max(1, self.bits.size)


def first_block_size(n: int, q_estimate: float) -> int:
    if q_estimate <= 0:
        log.warning("QBER estimate is zero; falling back to k1 = n/4")
        return max(1, n // 4)
    return max(1, math.ceil(0.73 / q_estimate))


def pass_permutation(n: int, pass_index: int, seed: int) -> np.ndarray:
    if pass_index == 0:
        return np.arange(n, dtype=np.int64)
    return np.random.default_rng([seed, pass_index]).permutation(n).astype(np.int64)


def verification_hash(bits: np.ndarray, point: int) -> int:
    return poly_hash(np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes(), point) & _VERIFY_MASK


class ParityOracle:
    """Alice's side: parities of her key over ranges of each pass permutation."""

    def __init__(self, bits):
        self.bits = np.asarray(bits, dtype=np.uint8)
        self._prefix: dict[int, np.ndarray] = {}

    def shuffle(self, pass_index: int, seed: int) -> None:
        perm = pass_permutation(self.bits.size, pass_index, seed)
        self._prefix[pass_index] = np.concatenate(
            [[0], np.cumsum(self.bits[perm], dtype=np.int64)]) & 1

    def parities(self, ranges: Sequence[tuple[int, int, int]]) -> np.ndarray:
        out = np.empty(len(ranges), dtype=np.uint8)
        for k, (p, lo, hi) in enumerate(ranges):
            pre = self._prefix.get(p)
            if pre is None:
                raise KeyError(f"no shuffle announced for pass {p}")
            if not 0 <= lo < hi <= self.bits.size:
                raise ValueError(f"bad parity range {lo}:{hi}")
            out[k] = pre[hi] ^ pre[lo]
        return out

    def verify(self, point: int) -> int:
        return verification_hash(self.bits, point)

    def answer(self, request):
        if isinstance(request, Shuffle):
            self.shuffle(request.pass_index, request.seed)
            return None
        if isinstance(request, ParityQuery):
            return self.parities(request.ranges)
        if isinstance(request, VerifyQuery):
            return self.verify(request.point)
        raise TypeError(f"unknown request {request!r}")


def cascade_rounds(bits, q_estimate: float, rng: np.random.Generator,
                   passes: int = N_PASSES) -> Generator[object, object, CascadeResult]:
    """Bob's side of Cascade as a request/reply generator."""
    key = np.asarray(bits, dtype=np.uint8).copy()
    n = key.size
    k1 = first_block_size(n, q_estimate)
    perms: list[np.ndarray] = []
    where: list[np.ndarray] = []  # position of each bit in each pass order
    sizes: list[int] = []
    # Alice's revealed parities, keyed by (pass, lo, hi)
    known: dict[tuple[int, int, int], int] = {}
    mismatch: list[np.ndarray] = []
    parity_bits = 0
    rounds = 0
    flips = 0

    def bob_parity(p: int, lo: int, hi: int) -> int:
        return int(key[perms[p][lo:hi]].sum() & 1)

    def block_range(p: int, b: int) -> tuple[int, int]:
        return b * sizes[p], min((b + 1) * sizes[p], n)

    for p in range(passes):
        if n == 0:
            break
        k = min(n, k1 << p)
        seed = int(rng.integers(0, 2**63))
        yield Shuffle(p, seed)
        perm = pass_permutation(n, p, seed)
        perms.append(perm)
        pos = np.empty(n, dtype=np.int64)
        pos[perm] = np.arange(n)
        where.append(pos)
        sizes.append(k)
        n_blocks = -(-n // k)
        tops = [(p, *block_range(p, b)) for b in range(n_blocks)]
        reply = yield ParityQuery(tuple(tops))
        rounds += 1
        parity_bits += len(tops)
        alice = np.asarray(reply, dtype=np.uint8)
        for r, a in zip(tops, alice):
            known[r] = int(a)
        bob = np.array([bob_parity(*r) for r in tops], dtype=np.uint8)
        mismatch.append(alice ^ bob)

        # binary searches in flight: (pass, lo, hi)
        while True:
            active = [(q, *block_range(q, int(b))) for q in range(p + 1) for b in np.flatnonzero(mismatch[q])]
            if not active:
                break
            # shortest blocks first gives the cheapest corrections
            active.sort(key=lambda r: (r[2] - r[1], r[0], r[1]))
            searches = []
            seen_bits = set()
            for q, lo, hi in active:
                members = perms[q][lo:hi]
                if seen_bits.intersection(members.tolist()):
                    continue
                seen_bits.update(members.tolist())
                searches.append((q, lo, hi))
            while searches:
                ask = []
                for q, lo, hi in searches:
                    mid = (lo + hi) // 2
                    if (q, lo, mid) not in known and (q, mid, hi) not in known:
                        ask.append((q, lo, mid))
                if ask:
                    reply = yield ParityQuery(tuple(ask))
                    rounds += 1
                    parity_bits += len(ask)
                    for r, a in zip(ask, np.asarray(reply, dtype=np.uint8)):
                        known[r] = int(a)
                nxt = []
                for q, lo, hi in searches:
                    mid = (lo + hi) // 2
                    whole = known[(q, lo, hi)]
                    if (q, lo, mid) in known:
                        left = known[(q, lo, mid)]
                        known.setdefault((q, mid, hi), whole ^ left)
                    else:
                        left = whole ^ known[(q, mid, hi)]
                        known[(q, lo, mid)] = left
                    if left != bob_parity(q, lo, mid):
                        lo, hi = lo, mid
                    else:
                        lo, hi = mid, hi
                    if hi - lo == 1:
                        bit = int(perms[q][lo])
                        key[bit] ^= 1
                        flips += 1
                        for qq in range(p + 1):
                            mismatch[qq][where[qq][bit] // sizes[qq]] ^= 1
                    else:
                        nxt.append((q, lo, hi))
                searches = nxt

    point = int(rng.integers(1, 2**62))
    reply = yield VerifyQuery(point)
    rounds += 1
    verified = int(reply) == verification_hash(key, point)
    return CascadeResult(key, parity_bits + VERIFY_BITS, verified, flips, rounds, parity_bits, sizes)


def cascade_correct(bits, q_estimate: float, channel, rng: np.random.Generator | None = None,
                    passes: int = N_PASSES) -> CascadeResult:
    """Correct ``bits`` against the key behind ``channel``.

    ``channel`` answers requests; a :class:`ParityOracle` over Alice's bits is
    the local form.
    """
    rng = rng or np.random.default_rng()
    gen = cascade_rounds(bits, q_estimate, rng, passes)
    reply = None
    try:
        while True:
            req = gen.send(reply)
            reply = channel.answer(req)
    except StopIteration as stop:
        return stop.value
