"""Alice's source: symbols to per-slot mean photon numbers (time-bin encoding)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .randomness import Symbol


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class EmitterConfig:
    mu: float = 0.5
    slot_rate: float = 625.0e6
    extinction_ratio: float = 1000.0
    pulse_width: float = 300.0e-12  # informational

    def __post_init__(self):
        if not 0.0 < self.mu < 1.0:
            raise ValueError(f"mu must be in (0, 1), got {self.mu}")
        if self.slot_rate <= 0:
            raise ValueError("slot_rate must be positive")
        if self.extinction_ratio <= 0:
            raise ValueError("extinction_ratio must be positive")

    @property
    def bit_rate(self) -> float:
        return self.slot_rate / 2.0

    @property
    def residual(self) -> float:
        return self.mu / self.extinction_ratio

    @classmethod
    def from_params(cls, params) -> "EmitterConfig":
        return cls(params.mu, params.slot_rate, params.extinction_ratio, params.pulse_width)


@dataclass(frozen=True)
class SymbolFrame:
    symbol: Symbol
    slots: tuple[float, float]
    slot_period: float


def encode_symbol(symbol: Symbol, config: EmitterConfig) -> SymbolFrame:
    mu, r = config.mu, config.residual
    sym = Symbol(symbol)
    if sym is Symbol.BIT0:
        slots = (r, mu)
    elif sym is Symbol.BIT1:
        slots = (mu, r)
    else:
        slots = (mu, mu)
    return SymbolFrame(sym, slots, 1.0 / config.slot_rate)


def slot_table(config: EmitterConfig) -> np.ndarray:
    """Intensity lookup: ``table[symbol, slot_in_frame]``."""
    return np.array([encode_symbol(s, config).slots for s in Symbol], dtype=float)


def frame_stream(symbols: Sequence[int] | np.ndarray, config: EmitterConfig) -> tuple[np.ndarray, np.ndarray]:
    """Serialize frames onto the slot timeline.

    Slot ``i`` of frame ``k`` lands at global slot ``2k + i``.  Returns the
    slot intensities and the frame log (symbol per frame) Alice keeps.
    """
    log = np.asarray(symbols, dtype=np.uint8)
    if log.size == 0:
        return np.empty(0, dtype=float), log
    return slot_table(config)[log].reshape(-1), log


def frames_from_slots(slots: np.ndarray, config: EmitterConfig) -> np.ndarray:
    """Inverse of :func:`frame_stream` (classifies each slot pair)."""
    pairs = np.asarray(slots, dtype=float).reshape(-1, 2)
    lit = pairs > (config.mu + config.residual) / 2.0
    out = np.full(len(pairs), Symbol.DECOY, dtype=np.uint8)
    out[lit[:, 0] & ~lit[:, 1]] = Symbol.BIT1
    out[~lit[:, 0] & lit[:, 1]] = Symbol.BIT0
    if np.any(~lit[:, 0] & ~lit[:, 1]):
        raise ValueError("slot pair with no pulse is not a valid frame")
    return out


def calibrate_attenuation(target_mu: float, measured_power_proxy: float) -> float:
    """Attenuator scale mapping the source's raw photons/pulse onto ``target_mu``."""
    if not measured_power_proxy > 0 or math.isinf(measured_power_proxy):
        raise CalibrationError(f"power proxy must be positive and finite, got {measured_power_proxy}")
    if not target_mu > 0:
        raise CalibrationError("target mu must be positive")
    return target_mu / measured_power_proxy
