"""Per-block bookkeeping and the secret-length rule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DEFAULT_SAFETY_BITS = 30


def compute_output_length(n: int, leak_ec: int, eve_info: float, safety_s: int = DEFAULT_SAFETY_BITS) -> int:
    """``max(0, floor(n (1 - I_AE)) - leak_ec - safety_s)``."""
    if n < 0 or leak_ec < 0 or safety_s < 0 or eve_info < 0:
        raise ValueError("inputs must be non-negative")
    if eve_info >= 1.0:
        return 0
    # the tiny offset keeps exact products such as 8192 * 0.4338 from rounding down
    return max(0, math.floor(n * (1.0 - eve_info) + 1e-9) - leak_ec - safety_s)


@dataclass
class KeyBlock:
    block_id: int
    n: int
    sifted: np.ndarray
    corrected: Optional[np.ndarray] = None
    leak_ec: int = 0
    verified: bool = False
    m: int = 0
    final: Optional[np.ndarray] = None
    qber: float = float("nan")
    visibility: float = float("nan")
    security_verified: bool = True
    frames: Optional[np.ndarray] = field(default=None, repr=False)
