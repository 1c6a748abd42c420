"""Initialisation steps: slot alignment, detection-window tuning, wavelength scan."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

log = logging.getLogger(__name__)

MIN_PATTERN = 1024
# the peak must stand this many standard deviations above the other lags
ALIGN_SIGNIFICANCE = 6.0
AMBIGUITY = 0.01


class AlignmentError(RuntimeError):
    pass


class TuningError(RuntimeError):
    pass


class ScanError(RuntimeError):
    pass


class InsufficientCounts(ScanError):
    """Too few monitor counts to pin down the fringe; lengthen the dwell."""

    def __init__(self, result: "ScanResult"):
        super().__init__(f"visibility error {result.visibility_error:.3g} from {result.counts} monitor counts")
        self.result = result


class ScanRefused(ScanError):
    """Fringe measured, but the visibility is below the start threshold."""

    def __init__(self, result: "ScanResult"):
        super().__init__(f"visibility {result.visibility:.4f} below start threshold")
        self.result = result


def align_offsets(known_pattern, detections) -> int:
    """Lag of Bob's detections (slot indices modulo the pattern length) against the pattern."""
    pattern = np.asarray(known_pattern, dtype=float)
    L = pattern.size
    if L < MIN_PATTERN:
        raise AlignmentError(f"pattern of {L} slots is shorter than {MIN_PATTERN}")
    det = np.asarray(detections, dtype=np.int64)
    if det.size == 0:
        raise AlignmentError("no detections")
    hist = np.bincount(det % L, minlength=L).astype(float)
    centred = pattern - pattern.mean()
    score = np.fft.irfft(np.conj(np.fft.rfft(centred)) * np.fft.rfft(hist), n=L)
    order = np.argsort(score)
    best, second = int(order[-1]), int(order[-2])
    rest = np.delete(score, best)
    spread = rest.std()
    if not score[best] > rest.mean() + ALIGN_SIGNIFICANCE * spread:
        raise AlignmentError("no significant correlation peak")
    if score[second] >= (1.0 - AMBIGUITY) * score[best]:
        raise AlignmentError(f"ambiguous peak at lags {best} and {second}")
    return best


def tune_window(scan_range: tuple[float, float], step: float,
                measure: Callable[[float], tuple[float, float]]) -> float:
    """Delay setting that maximises the data-line count rate.

    ``measure(delay)`` returns (counts, live slots).  The grid maximum is
    refined with a parabola through the log-rates of its neighbours, which is
    exact for a Gaussian window response.
    """
    lo, hi = scan_range
    if step <= 0 or hi < lo:
        raise ValueError("need step > 0 and a non-empty range")
    grid = np.arange(lo, hi + step / 2, step)
    counts = np.empty(grid.size)
    live = np.empty(grid.size)
    for k, d in enumerate(grid):
        counts[k], live[k] = measure(float(d))
    rates = counts / np.maximum(live, 1.0)
    i = int(np.argmax(rates))
    low = int(np.argmin(rates))
    spread = math.sqrt(counts[i] + counts[low])
    if counts[i] - counts[low] * live[i] / max(live[low], 1.0) < 5.0 * max(spread, 1.0):
        raise TuningError("flat count-rate response; no signal")
    if i in (0, grid.size - 1):
        log.warning("window scan maximum at the range boundary %.3f", grid[i])
        return float(grid[i])
    y = np.log(np.maximum(rates[i - 1: i + 2], 1e-300))
    denom = y[0] - 2.0 * y[1] + y[2]
    shift = 0.5 * (y[0] - y[2]) / denom if denom < 0 else 0.0
    return float(grid[i] + step * min(max(shift, -1.0), 1.0))


@dataclass(frozen=True)
class ScanResult:
    phase: float  # setpoint of the fringe minimum
    visibility: float
    rate_max: float
    rate_min: float
    dark_rate: float
    counts: int
    visibility_error: float = math.inf  # standard error from the Fisher information


def fit_fringe(phases: Sequence[float], counts, live, dark_counts: float, dark_live: float) -> ScanResult:
    """Poisson maximum-likelihood fit of ``dark + s (1 - V cos(phi - phi0))``.

    The dark rate is a free parameter constrained by the laser-off counts.  A
    linear least-squares fit of ``a + b cos + c sin`` seeds the search.
    """
    phi = np.asarray(phases, dtype=float)
    k = np.asarray(counts, dtype=float)
    live = np.maximum(np.asarray(live, dtype=float), 1.0)
    dark_live = max(float(dark_live), 1.0)
    rates = k / live
    design = np.column_stack([np.ones_like(phi), np.cos(phi), np.sin(phi)])
    (a, b, c), *_ = np.linalg.lstsq(design, rates, rcond=None)
    d0 = max(dark_counts, 1.0) / dark_live
    s0 = max(a - dark_counts / dark_live, d0, 1e-300)
    x0 = np.array([dark_counts / dark_live / d0, (a - dark_counts / dark_live) / s0 if a > d0 else 1.0,
                   min(max(math.hypot(b, c) / s0, 0.01), 0.999), math.atan2(-c, -b)])
    x0[:2] = np.maximum(x0[:2], 1e-6)

    def nll(x):
        lam = np.maximum(live * (d0 * x[0] + s0 * x[1] * (1.0 - x[2] * np.cos(phi - x[3]))), 1e-300)
        lam_d = max(dark_live * d0 * x[0], 1e-300)
        return float(np.sum(lam - k * np.log(lam)) + lam_d - dark_counts * math.log(lam_d))

    best = minimize(nll, x0, method="L-BFGS-B", bounds=[(0.0, None), (0.0, None), (0.0, 1.0), (None, None)])
    x = best.x if best.fun <= nll(x0) else x0
    dark, amp, vis, phase = d0 * x[0], s0 * x[1], float(x[2]), float(x[3])

    # Fisher information in (dark, amp, vis, phase)
    cos, sin = np.cos(phi - phase), np.sin(phi - phase)
    lam = np.maximum(live * (dark + amp * (1.0 - vis * cos)), 1e-300)
    grads = live * np.vstack([np.ones_like(phi), 1.0 - vis * cos, -amp * cos, -amp * vis * sin])
    info = (grads / lam) @ grads.T
    info[0, 0] += dark_live / max(dark, 1e-300)
    try:
        err = math.sqrt(max(np.linalg.inv(info)[2, 2], 0.0))
    except np.linalg.LinAlgError:
        err = math.inf
    if not math.isfinite(err):
        err = math.inf
    return ScanResult(phase % (2.0 * math.pi), vis, dark + amp * (1 + vis), dark + amp * (1 - vis), dark,
                      int(k.sum()), err)


def wavelength_scan(phase_grid: Sequence[float], measure: Callable[[float], tuple[float, float]],
                    measure_dark: Callable[[], tuple[float, float]], start_visibility: float = 0.97,
                    max_error: float = 0.01) -> ScanResult:
    """Sweep the laser phase over a full fringe and locate its minimum.

    ``measure(phase)`` returns the interfering-position (counts, opportunities)
    at that setting; ``measure_dark()`` the same with the laser off.  The
    fringe must pin the visibility to ``max_error`` (one standard error),
    otherwise :class:`InsufficientCounts` asks for a longer dwell.
    """
    grid = np.asarray(phase_grid, dtype=float)
    if grid.size < 3 or np.ptp(grid) < 2.0 * math.pi * (1.0 - 1.0 / grid.size) - 1e-9:
        raise ValueError("phase grid must cover one full fringe with at least 3 points")
    data = [measure(float(p)) for p in grid]
    counts = np.array([d[0] for d in data], dtype=float)
    live = np.array([d[1] for d in data], dtype=float)
    dark_counts, dark_live = measure_dark()
    result = fit_fringe(grid, counts, live, dark_counts, dark_live)
    if not result.visibility_error <= max_error:
        raise InsufficientCounts(result)
    if result.visibility < start_visibility:
        raise ScanRefused(result)
    return result
