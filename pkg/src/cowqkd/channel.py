"""Quantum channel: loss, visibility drift, and the beam-splitting tap."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .secmath import LinkBudget, db_to_transmission


@dataclass(frozen=True)
class VisibilityDrift:
    """Time-varying perturbation of the fringe.

    ``kind`` is one of
      * ``"step"``: visibility changes by ``delta`` from ``start`` on (for
        ``duration`` seconds if given);
      * ``"sine"``: ``amplitude * sin(2 pi t / period)`` added to V;
      * ``"phase_step"``: the interferometer phase walks off by the angle that
        lowers the visibility seen at the current setpoint by ``-delta``; a
        fresh wavelength scan recovers it.
    """

    kind: str = "step"
    start: float = 0.0
    delta: float = 0.0
    duration: Optional[float] = None
    amplitude: float = 0.0
    period: float = 1.0

    def active(self, time: float) -> bool:
        if time < self.start:
            return False
        return self.duration is None or time < self.start + self.duration


@dataclass(frozen=True)
class ChannelConfig:
    link: LinkBudget = field(default_factory=lambda: LinkBudget.from_loss(0.0))
    visibility: float = 0.98
    drifts: tuple[VisibilityDrift, ...] = ()
    bsa_fraction: float = 0.0
    delay_slots: int = 0  # quantum vs classical fibre length difference
    phase_offset: float = 0.0  # true fringe minimum, in laser-phase units

    @property
    def transmission(self) -> float:
        return self.link.transmission

    @classmethod
    def from_params(cls, params, **kw) -> "ChannelConfig":
        return cls(link=LinkBudget.from_loss(params.loss_db, params.attenuation_db_per_km),
                   visibility=params.visibility, **kw)


def transmit(slots: Sequence[float] | np.ndarray, config: ChannelConfig) -> np.ndarray:
    return np.asarray(slots, dtype=float) * config.transmission


def effective_visibility(config: ChannelConfig, time: float) -> float:
    """Fringe visibility of the channel + interferometer at ``time`` (seconds)."""
    v = config.visibility
    for d in config.drifts:
        if d.kind == "step" and d.active(time):
            v += d.delta
        elif d.kind == "sine" and time >= d.start:
            v += d.amplitude * math.sin(2.0 * math.pi * (time - d.start) / d.period)
    return min(1.0, max(0.0, v))


def phase_walk(config: ChannelConfig, time: float) -> float:
    """Extra interferometer phase (rad) from ``phase_step`` drifts at ``time``."""
    walk = 0.0
    for d in config.drifts:
        if d.kind == "phase_step" and d.active(time):
            base = config.visibility
            target = min(max(base + d.delta, 0.0), base)
            walk += math.acos(target / base) if base > 0 else 0.0
    return walk


def bsa_eve_yield(mu: float, t: float) -> float:
    """Eve's information from tapping the light lost in the line."""
    if mu <= 0 or not 0.0 <= t <= 1.0:
        raise ValueError("need mu > 0 and t in [0, 1]")
    return mu * (1.0 - t)


def loss_for_distance(fiber_km: float, attenuation_db_per_km: float = 0.21) -> float:
    return fiber_km * attenuation_db_per_km


def compose(loss_a_db: float, loss_b_db: float) -> float:
    """Transmission of two cascaded spans."""
    return db_to_transmission(loss_a_db) * db_to_transmission(loss_b_db)
