"""Privacy amplification by Toeplitz hashing over GF(2)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve


class ToeplitzSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ToeplitzSpec:
    """n-bit input, m-bit output; entry (i, j) of the matrix is ``seed[i - j + m - 1]``."""

    n: int
    m: int
    seed: np.ndarray

    def __post_init__(self):
        if self.n < 0 or self.m < 0:
            raise ToeplitzSpecError("n and m must be non-negative")
        if self.m and len(self.seed) != self.n + self.m - 1:
            raise ToeplitzSpecError(f"seed has {len(self.seed)} bits, need n + m - 1 = {self.n + self.m - 1}")

    @classmethod
    def random(cls, n: int, m: int, rng: np.random.Generator) -> "ToeplitzSpec":
        return cls(n, m, rng.integers(0, 2, size=max(n + m - 1, 0), dtype=np.uint8))

    def matrix(self) -> np.ndarray:
        """Explicit n x m matrix (small sizes only)."""
        i = np.arange(self.n)[:, None]
        j = np.arange(self.m)[None, :]
        return np.asarray(self.seed, dtype=np.uint8)[i - j + self.m - 1]


def privacy_amplify(bits, spec: ToeplitzSpec) -> np.ndarray:
    """``y_j = sum_i x_i * seed[i - j + m - 1] mod 2``, via one FFT correlation."""
    x = np.asarray(bits, dtype=np.uint8)
    if x.size != spec.n:
        raise ToeplitzSpecError(f"input has {x.size} bits, spec expects {spec.n}")
    if spec.m == 0:
        return np.empty(0, dtype=np.uint8)
    if spec.n == 0:
        return np.zeros(spec.m, dtype=np.uint8)
    seed = np.asarray(spec.seed, dtype=np.float64)
    # z_k = sum_i x_i seed[i + k] for k = 0..m-1, and y_j = z_{m-1-j}
    z = fftconvolve(seed, x[::-1].astype(np.float64), mode="valid")
    return (np.rint(z).astype(np.int64) & 1).astype(np.uint8)[::-1]
