"""Visibility from monitor-line clicks classified by position.

Alice classifies each monitor click by the two pulses the interferometer
overlaps at that slot: both non-empty (interfering), one non-empty, or none.
With per-opportunity rates ``R_int`` and ``R_ni`` (background from the empty
class subtracted) and ``eps = 1/extinction``, the mean-field intensities give

    rho = R_int / R_ni = 2 (1 - c) / ((1 + eps) - 2 c sqrt(eps))

where ``c`` is the visibility seen at the current phase setpoint, so ``c`` is
recovered in closed form.  Dead time scales every class alike and cancels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..link import POS_DARK, POS_INT, POS_NI

Z_95 = 1.959963984540054
MIN_EXPECTED_COUNTS = 20.0
MAX_HALF_WIDTH = 0.05


@dataclass(frozen=True)
class VisibilityEstimate:
    value: float
    low: float
    high: float
    # expected interfering-position counts if there were no interference at all
    n_eff: float
    counts: tuple[int, int, int]

    @property
    def half_width(self) -> float:
        return (self.high - self.low) / 2.0

    @property
    def sufficient(self) -> bool:
        return self.n_eff >= MIN_EXPECTED_COUNTS and self.half_width <= MAX_HALF_WIDTH


def visibility_from_ratio(rho: float, extinction_ratio: float = math.inf) -> float:
    eps = 0.0 if math.isinf(extinction_ratio) else 1.0 / extinction_ratio
    rho = max(rho, 0.0)
    den = 2.0 * (1.0 - rho * math.sqrt(eps))
    if den <= 0:
        return 0.0
    return min(1.0, max(0.0, (2.0 - rho * (1.0 + eps)) / den))


def _wilson(k: float, n: float, z: float = Z_95, extra_var: float = 0.0) -> tuple[float, float]:
    """Score interval for a proportion; ``extra_var`` adds variance on top of the binomial term."""
    if n <= 0:
        return 0.0, 1.0
    p = min(max(k / n, 0.0), 1.0)
    # solve (p - x)^2 = z^2 (x (1 - x) / n + extra_var) for x
    a = 1.0 + z * z / n
    b = 2.0 * p + z * z / n
    c = p * p - z * z * extra_var
    disc = max(b * b - 4.0 * a * c, 0.0)
    root = math.sqrt(disc)
    return max(0.0, (b - root) / (2 * a)), min(1.0, (b + root) / (2 * a))


def estimate_visibility(counts, opportunities, extinction_ratio: float = math.inf) -> VisibilityEstimate:
    """Visibility and a Wilson-style 95% interval.

    ``counts`` and ``opportunities`` are indexed by position class
    (DARK, NI, INT).  Opportunities may be fractions of the same total; only
    their ratios matter.  The interval is a Wilson score interval on the
    interfering share of the background-subtracted counts, widened by the
    variance the background subtraction adds.
    """
    n = np.asarray(counts, dtype=float)
    opp = np.asarray(opportunities, dtype=float)
    k_int = opp[POS_INT] / opp[POS_DARK] if opp[POS_DARK] > 0 else 0.0
    k_ni = opp[POS_NI] / opp[POS_DARK] if opp[POS_DARK] > 0 else 0.0
    s_int = max(n[POS_INT] - k_int * n[POS_DARK], 0.0)
    s_ni = max(n[POS_NI] - k_ni * n[POS_DARK], 0.0)
    scale = opp[POS_NI] / opp[POS_INT] if opp[POS_INT] > 0 else math.inf
    raw = tuple(int(x) for x in n)
    if s_ni <= 0 or not math.isfinite(scale):
        return VisibilityEstimate(0.0, 0.0, 1.0, 0.0, raw)
    n_eff = 2.0 * s_ni / scale

    total = s_int + s_ni
    share = s_int / total
    # delta-method variance of the share, background counts shared by both classes
    var_i = n[POS_INT] + k_int ** 2 * n[POS_DARK]
    var_n = n[POS_NI] + k_ni ** 2 * n[POS_DARK]
    cov = k_int * k_ni * n[POS_DARK]
    var_share = (s_ni ** 2 * var_i + s_int ** 2 * var_n - 2.0 * s_int * s_ni * cov) / total ** 4
    # what the background subtraction adds beyond binomial noise on the signal counts
    extra = max(var_share - share * (1.0 - share) / total, 0.0)

    def vis(frac: float) -> float:
        if frac >= 1.0:
            return 0.0
        return visibility_from_ratio(frac / (1.0 - frac) * scale, extinction_ratio)

    lo_f, hi_f = _wilson(s_int, total, extra_var=extra)
    return VisibilityEstimate(vis(share), vis(hi_f), vis(lo_f), n_eff, raw)


def classify_positions(slots: np.ndarray, lit_fn) -> np.ndarray:
    """Position class of monitor clicks; ``lit_fn(slots)`` says which slots carry a pulse."""
    slots = np.asarray(slots, dtype=np.int64)
    cur = lit_fn(slots)
    prev = np.zeros_like(cur)
    ok = slots > 0
    prev[ok] = lit_fn(slots[ok] - 1)
    return (cur + prev).astype(np.uint8)


__all__ = ["VisibilityEstimate", "estimate_visibility", "visibility_from_ratio", "classify_positions",
           "POS_DARK", "POS_NI", "POS_INT"]
