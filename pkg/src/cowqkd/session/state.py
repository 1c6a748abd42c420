"""Session configuration, state and records shared by both endpoints."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from ..channel import ChannelConfig
from ..params import SystemParams


class Phase(str, Enum):
    INIT_ALIGN = "INIT_ALIGN"
    INIT_WINDOW = "INIT_WINDOW"
    INIT_WAVELENGTH = "INIT_WAVELENGTH"
    EXCHANGING = "EXCHANGING"
    REALIGNING = "REALIGNING"
    HALTED = "HALTED"


class Verdict(int, Enum):
    PASS = 0
    FAIL = 1
    UNVERIFIED = 2  # too few monitor counts to judge
    RETRY = 3  # scan: rescan with a longer dwell
    REFUSED = 4  # scan: gave up


@dataclass(frozen=True)
class SessionConfig:
    """Everything both endpoints agree on before the session starts."""

    params: SystemParams
    seed: int = 1
    exchange_slots: int = 100_000_000
    round_slots: int = 1 << 24
    pattern_length: int = 10_000
    pattern_repeats: int = 1_000
    align_attempts: int = 8
    window_range: tuple[float, float] = (-0.5, 0.5)
    window_step: float = 0.1
    window_dwell: int = 1 << 22
    window_max_dwell: int = 1 << 36
    scan_points: int = 16
    scan_dwell: int = 1 << 24
    scan_max_dwell: int = 1 << 34
    scan_attempts: int = 4
    window_precision: float = 0.015  # interval half-width at which a watchdog window closes
    window_max_slots: int = 1 << 32
    watchdog_min: float = 100.0
    tracking_every: int = 8
    dither: float = 0.05
    tracking_gain: float = 0.5
    auth_pool_bits: int = 1 << 20
    sample_fraction: float = 0.1
    safety_bits: int = 30
    max_rescans: int = 20
    channel: Optional[ChannelConfig] = None

    def __post_init__(self):
        if self.round_slots % 2 or self.round_slots <= 0:
            raise ValueError("round_slots must be a positive even number")
        if self.tracking_every % 2:
            raise ValueError("tracking_every must be even (dither alternates sign)")

    @property
    def block_size(self) -> int:
        return self.params.block_size

    def channel_config(self) -> ChannelConfig:
        return self.channel or ChannelConfig.from_params(self.params)


@dataclass
class SessionState:
    phase: Phase = Phase.INIT_ALIGN
    offset_slots: int = 0
    window_delay: float = 0.0
    phase_setpoint: float = 0.0
    visibility_estimate: float = math.nan
    visibility_interval: tuple[float, float] = (math.nan, math.nan)
    slots_sent: int = 0
    detections: int = 0
    decoys_removed: int = 0


@dataclass
class SiftedBlock:
    """Both halves of a sifted block, as only the harness can see them."""

    alice: np.ndarray
    bob: np.ndarray
    frames: np.ndarray
    visibility_at_block: float
    qber_estimate: float

    def __post_init__(self):
        if self.alice.size != self.bob.size or self.alice.size != self.frames.size:
            raise ValueError("Alice and Bob halves must have equal length")


@dataclass
class WindowRecord:
    index: int
    start_slot: int
    stop_slot: int
    verdict: Verdict
    visibility: float
    low: float
    high: float
    n_eff: float
    setpoint: float


@dataclass
class BlockRecord:
    block_id: int
    n: int
    leak_ec: int
    m: int
    verified: bool
    qber: float
    visibility: float
    security_verified: bool
    first_frame: int
    last_frame: int
    time: float
    frames: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0, np.int64))


@dataclass
class ActorResult:
    role: str
    state: SessionState
    halt_reason: Optional[str]
    key: np.ndarray
    blocks: list[BlockRecord]
    windows: list[WindowRecord]
    events: list[dict]
    sifted_bits: np.ndarray  # every sifted bit, committed or not
    sifted_frames: np.ndarray
    exchange_slots: int
    extra: dict = field(default_factory=dict)

    @property
    def blocks_ok(self) -> int:
        return sum(1 for b in self.blocks if b.verified)

    @property
    def blocks_rejected(self) -> int:
        return sum(1 for b in self.blocks if not b.verified)
