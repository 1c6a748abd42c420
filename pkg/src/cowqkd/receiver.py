"""Bob's optics and single-photon detector models.

Slot-by-slot API.  :mod:`cowqkd.link` implements the same model in bulk over
long stretches of the timeline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

import numpy as np

from .params import DetectorConfig


class SequencingError(RuntimeError):
    """Slots were presented to a detector out of order."""


class Line(IntEnum):
    DATA = 0
    MONITOR = 1


class Cause(IntEnum):
    SIGNAL = 0
    DARK = 1
    AFTERPULSE = 2


@dataclass
class DetectorState:
    blocked_until: int = 0  # first live slot
    afterpulse_queue: list[int] = field(default_factory=list)
    last_slot: int = -1


@dataclass(frozen=True)
class DetectionEvent:
    slot: int
    detector: Line
    # simulation truth only; protocol code must never read it
    cause: Cause


def split(intensity: float, data_fraction: float = 0.9) -> tuple[float, float]:
    if intensity < 0:
        raise ValueError("intensity must be non-negative")
    return data_fraction * intensity, (1.0 - data_fraction) * intensity


def interference_intensity(prev: float, cur: float, visibility: float, phase: float) -> float:
    """Mean photon number at D_M when pulses ``prev`` and ``cur`` overlap."""
    mean = (prev + cur) / 4.0 - visibility * math.cos(phase) * math.sqrt(prev * cur) / 2.0
    return max(0.0, mean)


def _afterpulse_delay(config: DetectorConfig, slot_rate: float, rng: np.random.Generator) -> int:
    tau = config.afterpulse_decay * slot_rate
    q = math.exp(-1.0 / tau) if tau > 0 else 0.0
    return int(rng.geometric(1.0 - q)) - 1


def _detect(slot: int, intensity: float, line: Line, state: DetectorState, config: DetectorConfig,
            rng: np.random.Generator, slot_rate: float) -> Optional[DetectionEvent]:
    if slot <= state.last_slot:
        raise SequencingError(f"slot {slot} after slot {state.last_slot}")
    state.last_slot = slot
    if state.afterpulse_queue and state.afterpulse_queue[0] < slot:
        # armed afterpulse already passed while the caller skipped slots
        state.afterpulse_queue.pop(0)
    if slot < state.blocked_until:
        return None
    p_sig = -math.expm1(-config.eta * intensity)
    p_dark = config.dark_prob(slot_rate)
    u = rng.random()
    cause = None
    if u < p_sig:
        cause = Cause.SIGNAL
    elif u < p_sig + (1.0 - p_sig) * p_dark:
        cause = Cause.DARK
    elif state.afterpulse_queue and state.afterpulse_queue[0] == slot:
        cause = Cause.AFTERPULSE
    if cause is None:
        return None
    state.blocked_until = slot + config.dead_slots(slot_rate) + 1
    state.afterpulse_queue.clear()
    if config.afterpulse_total > 0 and rng.random() < config.afterpulse_total:
        state.afterpulse_queue.append(state.blocked_until + _afterpulse_delay(config, slot_rate, rng))
    return DetectionEvent(slot, line, cause)


def detect_data(slot: int, intensity: float, state: DetectorState, config: DetectorConfig,
                rng: np.random.Generator, slot_rate: float = 625.0e6) -> Optional[DetectionEvent]:
    """One slot on the data detector; ``intensity`` is the mean photon number reaching it."""
    return _detect(slot, intensity, Line.DATA, state, config, rng, slot_rate)


def detect_monitor(slot: int, window: tuple[float, float], visibility: float, phase: float,
                   state: DetectorState, config: DetectorConfig, rng: np.random.Generator,
                   slot_rate: float = 625.0e6) -> Optional[DetectionEvent]:
    """One slot on the monitor detector.

    ``window`` holds the monitor-arm intensities of slots ``slot - 1`` and
    ``slot``; the interferometer delay of one slot overlaps exactly these two.
    """
    mean = interference_intensity(window[0], window[1], visibility, phase)
    return _detect(slot, mean, Line.MONITOR, state, config, rng, slot_rate)


def reset_detector(state: DetectorState) -> DetectorState:
    state.blocked_until = 0
    state.afterpulse_queue.clear()
    return state
