"""Alice's randomness chain: seed source -> 32-bit LFSR -> symbol stream.

The true random source is stood in for by SHA-256 in counter mode, keyed by
the experiment seed, so the seed of any reseed segment can be computed
directly.  A captured QRNG stream can be replayed from a file of
little-endian 32-bit words instead.

Symbols are generated in segments of ``reseed_interval`` symbols, each
starting from its own seed.  The bulk generator is a numba kernel; the
pure-Python ``lfsr_next`` / ``next_symbol`` functions define the reference
behaviour and are used to check it.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

log = logging.getLogger(__name__)

DEFAULT_WIDTH = 32
DEFAULT_TAPS = (32, 22, 2, 1)
# x^8 + x^6 + x^5 + x^4 + 1, maximal length at width 8
TEST_TAPS_8 = (8, 6, 5, 4)
FALLBACK_SEED = 0xACE1_2468
DECOY_PATTERN = 0b1010
# 64 us at 312.5 Mb/s
DEFAULT_RESEED_INTERVAL = 20_000


class Symbol(IntEnum):
    BIT0 = 0
    BIT1 = 1
    DECOY = 2


class LfsrError(ValueError):
    pass


@dataclass(frozen=True)
class LfsrState:
    """Fibonacci LFSR. Bit ``i`` of ``register`` is the ``i``-th next output bit."""

    register: int
    width: int = DEFAULT_WIDTH
    taps: tuple[int, ...] = DEFAULT_TAPS
    bits_since_reseed: int = 0

    @property
    def shifts(self) -> tuple[int, ...]:
        return tuple(self.width - t for t in self.taps)


def lfsr_next(state: LfsrState) -> tuple[int, LfsrState]:
    """Advance one step; returns the shifted-out bit and the new state."""
    reg = state.register
    if reg == 0:
        raise LfsrError("LFSR register is zero (absorbing state)")
    fb = 0
    for s in state.shifts:
        fb ^= reg >> s
    fb &= 1
    out = reg & 1
    reg = (reg >> 1) | (fb << (state.width - 1))
    return out, replace(state, register=reg, bits_since_reseed=state.bits_since_reseed + 1)


def reseed(state: LfsrState, seed: int) -> LfsrState:
    mask = (1 << state.width) - 1
    seed &= mask
    if seed == 0:
        log.warning("zero LFSR seed replaced by fallback 0x%X", FALLBACK_SEED & mask)
        seed = FALLBACK_SEED & mask
    return replace(state, register=seed, bits_since_reseed=0)


def lfsr_period(state: LfsrState, limit: int | None = None) -> int:
    """Steps until the register returns to its starting value (brute force)."""
    start = state.register
    limit = (1 << state.width) if limit is None else limit
    s = state
    for n in range(1, limit + 1):
        _, s = lfsr_next(s)
        if s.register == start:
            return n
    raise LfsrError(f"no period within {limit} steps")


# --- seed sources ---------------------------------------------------------


class SeedSource:
    """Random-access source of 32-bit reseed words (SHA-256 counter mode)."""

    def __init__(self, seed: int, label: bytes = b"alice-qrng"):
        self._key = label + struct.pack("<Q", seed & 0xFFFF_FFFF_FFFF_FFFF)
        self._cache: dict[int, np.ndarray] = {}

    def _block(self, b: int) -> np.ndarray:
        blk = self._cache.get(b)
        if blk is None:
            digest = hashlib.sha256(self._key + struct.pack("<Q", b)).digest()
            blk = np.frombuffer(digest, dtype="<u4").copy()
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[b] = blk
        return blk

    def word(self, index: int) -> int:
        return int(self._block(index // 8)[index % 8])

    def words(self, indices: Sequence[int] | np.ndarray) -> np.ndarray:
        return np.array([self.word(int(i)) for i in indices], dtype=np.uint32)


class FileSeedSource:
    """Replays captured seed words: a little-endian stream of uint32, one per reseed."""

    def __init__(self, path: str | Path):
        data = Path(path).read_bytes()
        if len(data) % 4:
            raise ValueError(f"seed file length {len(data)} is not a multiple of 4")
        self._words = np.frombuffer(data, dtype="<u4").copy()
        if self._words.size == 0:
            raise ValueError("seed file is empty")

    def __len__(self) -> int:
        return int(self._words.size)

    def word(self, index: int) -> int:
        if index >= self._words.size:
            raise IndexError(f"seed file exhausted at reseed {index}")
        return int(self._words[index])

    def words(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and idx.max() >= self._words.size:
            raise IndexError("seed file exhausted")
        return self._words[idx]


# --- symbol stream (reference implementation) -----------------------------


@dataclass
class SymbolStream:
    """Sequential symbol generator with the clear-on-match decoy rule.

    ``decoy_fraction`` replaces the pattern rule when set: a symbol is a
    decoy when the post-step register, read as a 32-bit integer, falls below
    ``decoy_fraction * 2**32``.
    """

    source: object
    reseed_interval: int = DEFAULT_RESEED_INTERVAL
    decoy_fraction: float | None = None
    lfsr: LfsrState | None = None
    window: int = 0
    index: int = 0  # symbols emitted so far
    raw_bits: Sequence[int] | None = None  # test hook: bypass the LFSR

    def _raw_bit(self) -> int:
        if self.raw_bits is not None:
            return int(self.raw_bits[self.index % len(self.raw_bits)])
        return self._lfsr_bit()

    def _lfsr_bit(self) -> int:
        if self.index % self.reseed_interval == 0:
            seg = self.index // self.reseed_interval
            base = self.lfsr or LfsrState(register=1)
            self.lfsr = reseed(base, self.source.word(seg))
            self.window = 0
        bit, self.lfsr = lfsr_next(self.lfsr)
        return bit


def next_symbol(stream: SymbolStream) -> Symbol:
    bit = stream._raw_bit()
    if stream.decoy_fraction is not None:
        threshold = int(stream.decoy_fraction * 2**32)
        reg = stream.lfsr.register if stream.lfsr is not None else 0
        stream.index += 1
        return Symbol.DECOY if reg < threshold else Symbol(bit)
    stream.window = ((stream.window << 1) | bit) & 0xF
    stream.index += 1
    if stream.window == DECOY_PATTERN:
        stream.window = 0
        return Symbol.DECOY
    return Symbol(bit)


# --- bulk generation ------------------------------------------------------


@numba.njit(cache=True)
def _gen_segments(seeds, length, shifts, width, threshold):
    n = seeds.shape[0]
    out = np.empty((n, length), dtype=np.uint8)
    top = np.uint64(width - 1)
    one = np.uint64(1)
    fallback = np.uint64(FALLBACK_SEED) & ((one << np.uint64(width)) - one)
    for i in range(n):
        reg = np.uint64(seeds[i])
        if reg == 0:
            reg = fallback
        window = 0
        for k in range(length):
            fb = np.uint64(0)
            for s in shifts:
                fb ^= reg >> np.uint64(s)
            bit = reg & one
            reg = (reg >> one) | ((fb & one) << top)
            if threshold >= 0:
                if reg < np.uint64(threshold):
                    out[i, k] = 2
                else:
                    out[i, k] = np.uint8(bit)
            else:
                window = ((window << 1) | int(bit)) & 15
                if window == 10:
                    window = 0
                    out[i, k] = 2
                else:
                    out[i, k] = np.uint8(bit)
    return out


class SegmentGenerator:
    """Generates (and caches) whole reseed segments of Alice's symbol stream."""

    def __init__(self, source, reseed_interval: int = DEFAULT_RESEED_INTERVAL,
                 decoy_fraction: float | None = None, taps: tuple[int, ...] = DEFAULT_TAPS,
                 width: int = DEFAULT_WIDTH, cache_size: int = 2048):
        self.source = source
        self.interval = int(reseed_interval)
        self.decoy_fraction = decoy_fraction
        self.width = width
        self._shifts = np.array([width - t for t in taps], dtype=np.int64)
        self._threshold = -1 if decoy_fraction is None else int(decoy_fraction * 2**32)
        self._cache: dict[int, np.ndarray] = {}
        self._cache_size = cache_size

    def segments(self, indices) -> dict[int, np.ndarray]:
        idx = sorted({int(i) for i in indices})
        missing = [i for i in idx if i not in self._cache]
        if missing:
            seeds = np.array([self.source.word(i) for i in missing], dtype=np.uint64)
            block = _gen_segments(seeds, self.interval, self._shifts, self.width, self._threshold)
            if len(self._cache) + len(missing) > self._cache_size:
                keep = set(idx)
                self._cache = {k: v for k, v in self._cache.items() if k in keep}
            for row, i in enumerate(missing):
                self._cache[i] = block[row]
        return {i: self._cache[i] for i in idx}

    def symbols(self, start: int, stop: int) -> np.ndarray:
        """Symbols with global indices in ``[start, stop)``."""
        if stop <= start:
            return np.empty(0, dtype=np.uint8)
        first, last = start // self.interval, (stop - 1) // self.interval
        segs = self.segments(range(first, last + 1))
        flat = np.concatenate([segs[i] for i in range(first, last + 1)])
        off = start - first * self.interval
        return flat[off: off + (stop - start)]

    def symbols_at(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.int64)
        if frames.size == 0:
            return np.empty(0, dtype=np.uint8)
        seg_idx = frames // self.interval
        segs = self.segments(np.unique(seg_idx))
        out = np.empty(frames.size, dtype=np.uint8)
        for i, arr in segs.items():
            mask = seg_idx == i
            out[mask] = arr[frames[mask] - i * self.interval]
        return out

    def forget(self) -> None:
        self._cache.clear()
