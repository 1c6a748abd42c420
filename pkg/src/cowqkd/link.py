"""Bulk slot-level Monte Carlo of the quantum link: emitter -> fibre -> Bob.

Clicks are rare compared with slots, so instead of drawing a uniform number
per slot the engine draws candidate slots by geometric skipping at the
largest per-slot click probability of the detector and thins them to the
true probability of the slot they land on.  This is exact for independent
per-slot Bernoulli trials.  Only the reseed segments that contain candidates
are generated.  Dead time and afterpulses are then applied in time order.

Positions on the monitor line are classed by the two pulses the
interferometer overlaps there: ``INT`` (both non-empty), ``NI`` (one
non-empty) and ``DARK`` (none).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import secmath
from .channel import ChannelConfig, effective_visibility, phase_walk
from .emitter import EmitterConfig, slot_table
from .params import DetectorConfig, SystemParams
from .randomness import SegmentGenerator
from .receiver import Cause, DetectorState

POS_DARK, POS_NI, POS_INT = 0, 1, 2
# slots of each symbol that carry a pulse: BIT0 = (0, mu), BIT1 = (mu, 0), DECOY = (mu, mu)
_LIT = np.array([[0, 1], [1, 0], [1, 1]], dtype=np.uint8)


@dataclass
class Clicks:
    slots: np.ndarray
    causes: np.ndarray

    @classmethod
    def empty(cls) -> "Clicks":
        return cls(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.uint8))

    def __len__(self) -> int:
        return int(self.slots.size)


def slot_lit(gen: SegmentGenerator, slots: np.ndarray) -> np.ndarray:
    """1 where the slot carries a mu pulse, 0 for an (ideally) empty slot."""
    slots = np.asarray(slots, dtype=np.int64)
    sym = gen.symbols_at(slots // 2)
    return _LIT[sym, slots % 2]


def position_class(gen: SegmentGenerator, slots: np.ndarray) -> np.ndarray:
    """Monitor position class of each slot (pulses ``slot - 1`` and ``slot``)."""
    slots = np.asarray(slots, dtype=np.int64)
    cur = slot_lit(gen, slots)
    prev = np.zeros_like(cur)
    ok = slots > 0
    prev[ok] = slot_lit(gen, slots[ok] - 1)
    return (cur + prev).astype(np.uint8)


def count_position_classes(symbols: np.ndarray) -> np.ndarray:
    """Counts of DARK/NI/INT positions fully inside a run of symbols."""
    lit = _LIT[symbols].reshape(-1)
    pair = lit[1:] + lit[:-1]
    return np.bincount(pair, minlength=3)[:3].astype(np.int64)


def _renewal_filter(cand: np.ndarray, causes: np.ndarray, state: DetectorState, stop: int,
                    dead: int, p_ap: float, q: float, rng: np.random.Generator) -> Clicks:
    """Apply dead time and afterpulses to time-ordered candidate clicks."""
    out_s: list[int] = []
    out_c: list[int] = []
    i = 0
    n = cand.size
    ap = state.afterpulse_queue[0] if state.afterpulse_queue else -1
    while True:
        i = int(np.searchsorted(cand, state.blocked_until, side="left")) if i < n else n
        nxt = int(cand[i]) if i < n else stop
        if 0 <= ap < state.blocked_until:
            ap = -1
        if ap >= 0 and ap < nxt:
            slot, cause = ap, int(Cause.AFTERPULSE)
        elif i < n:
            slot, cause = nxt, int(causes[i])
            i += 1
        else:
            break
        if slot >= stop:
            break
        out_s.append(slot)
        out_c.append(cause)
        state.blocked_until = slot + dead + 1
        ap = -1
        if p_ap > 0 and rng.random() < p_ap:
            ap = state.blocked_until + int(rng.geometric(1.0 - q)) - 1
    state.afterpulse_queue = [ap] if ap >= 0 else []
    state.last_slot = stop - 1
    return Clicks(np.array(out_s, dtype=np.int64), np.array(out_c, dtype=np.uint8))


@dataclass
class DetectorModel:
    config: DetectorConfig
    slot_rate: float
    state: DetectorState = field(default_factory=DetectorState)

    def __post_init__(self):
        self.dead = self.config.dead_slots(self.slot_rate)
        self.dark = self.config.dark_prob(self.slot_rate)
        self.p_ap = self.config.afterpulse_total
        tau = self.config.afterpulse_decay * self.slot_rate
        self.q = math.exp(-1.0 / tau) if tau > 0 else 0.0

    def click_prob(self, mean_photons: np.ndarray | float) -> np.ndarray:
        return 1.0 - np.exp(-self.config.eta * np.asarray(mean_photons)) * (1.0 - self.dark)

    def candidates(self, start: int, stop: int, p_max: float, rng: np.random.Generator) -> np.ndarray:
        if p_max <= 0 or stop <= start:
            return np.empty(0, dtype=np.int64)
        n = stop - start
        chunks = []
        pos = start - 1
        while pos < stop:
            expect = p_max * (stop - pos)
            size = int(expect + 6.0 * math.sqrt(expect) + 16)
            steps = rng.geometric(p_max, size=size)
            got = pos + np.cumsum(steps, dtype=np.int64)
            chunks.append(got)
            pos = int(got[-1])
        out = np.concatenate(chunks)
        return out[out < stop]

    def run(self, start: int, stop: int, p_max: float, prob_fn, rng: np.random.Generator,
            window_scale: float = 1.0) -> Clicks:
        """Clicks in ``[start, stop)``. ``prob_fn(slots) -> (p_total, p_signal)``."""
        if self.state.blocked_until < start and self.state.afterpulse_queue:
            if self.state.afterpulse_queue[0] < start:
                self.state.afterpulse_queue = []
        cand = self.candidates(start, stop, p_max, rng)
        if cand.size:
            p_tot, p_sig = prob_fn(cand)
            u = rng.random(cand.size) * p_max
            keep = u < p_tot
            cand = cand[keep]
            causes = np.where(u[keep] < p_sig[keep], Cause.SIGNAL, Cause.DARK).astype(np.uint8)
        else:
            causes = np.empty(0, dtype=np.uint8)
        return _renewal_filter(cand, causes, self.state, stop, self.dead, self.p_ap, self.q, rng)


class QuantumLink:
    """Photons from Alice's symbol stream to clicks on D_B and D_M.

    ``stream`` is a replica of Alice's segment generator (the photons carry
    her symbols); ``rng`` is the detector randomness.
    """

    def __init__(self, params: SystemParams, stream: SegmentGenerator, rng: np.random.Generator,
                 channel: ChannelConfig | None = None):
        self.params = params
        self.stream = stream
        self.rng = rng
        self.channel = channel or ChannelConfig.from_params(params)
        self.emitter = EmitterConfig.from_params(params)
        self.table = slot_table(self.emitter)  # [symbol, slot_in_frame]
        self.data = DetectorModel(params.data_detector, params.slot_rate)
        self.monitor = DetectorModel(params.monitor_detector, params.slot_rate)
        self.window_delay = 0.0  # Bob's detection-window setting, slot units
        self.phase_setpoint = 0.0  # Alice's laser phase setting
        self.light_on = True
        self.clock_offset = 0  # Bob's slot-clock correction from alignment

    # -- optics ----------------------------------------------------------
    @property
    def t(self) -> float:
        return self.channel.transmission

    def window_efficiency(self, delay: float | None = None) -> float:
        delay = self.window_delay if delay is None else delay
        width = self.params.pulse_width * self.params.slot_rate
        err = delay - self.params.window_offset
        return math.exp(-0.5 * (err / width) ** 2) if width > 0 else 1.0

    def slot_intensity(self, slots: np.ndarray) -> np.ndarray:
        """Mean photon number arriving at Bob (before the 90/10 coupler)."""
        slots = np.asarray(slots, dtype=np.int64)
        sym = self.stream.symbols_at(slots // 2)
        return self.table[sym, slots % 2] * self.t

    def phase_error(self, time: float) -> float:
        return self.phase_setpoint - self.channel.phase_offset - phase_walk(self.channel, time)

    def visibility(self, time: float) -> float:
        return effective_visibility(self.channel, time)

    # -- slot-level simulation ------------------------------------------
    def simulate(self, start: int, stop: int) -> tuple[Clicks, Clicks]:
        """Data and monitor clicks for Alice's slots ``[start, stop)``.

        Slots are returned on Bob's clock: shifted by the channel delay and
        corrected by ``clock_offset``, so a correct alignment maps them back
        onto Alice's indices.
        """
        if not self.light_on:
            out = (self._dark_only(self.data, start, stop), self._dark_only(self.monitor, start, stop))
        else:
            time = start / self.params.slot_rate
            out = (self._run_data(start, stop), self._run_monitor(start, stop, time))
        shift = self.channel.delay_slots - self.clock_offset
        if shift:
            out = tuple(Clicks(c.slots + shift, c.causes) for c in out)
        return out

    def _dark_only(self, det: DetectorModel, start: int, stop: int) -> Clicks:
        zero = lambda s: (np.full(s.size, det.dark), np.zeros(s.size))  # noqa: E731
        return det.run(start, stop, det.dark, zero, self.rng)

    def _run_data(self, start: int, stop: int) -> Clicks:
        det = self.data
        gain = self.params.data_split * self.window_efficiency()
        i_max = self.emitter.mu * self.t * gain
        p_max = float(det.click_prob(i_max))

        def prob(slots):
            lam = det.config.eta * gain * self.slot_intensity(slots)
            p_sig = -np.expm1(-lam)
            return 1.0 - (1.0 - p_sig) * (1.0 - det.dark), p_sig

        return det.run(start, stop, p_max, prob, self.rng)

    def _run_monitor(self, start: int, stop: int, time: float) -> Clicks:
        det = self.monitor
        arm = (1.0 - self.params.data_split) * self.params.monitor_path_transmission * self.window_efficiency()
        c = self.visibility(time) * math.cos(self.phase_error(time))
        i_max = self.emitter.mu * self.t * arm * (1.0 + abs(c)) / 2.0
        p_max = float(det.click_prob(i_max))

        def prob(slots):
            cur = self.slot_intensity(slots) * arm
            prev = np.zeros_like(cur)
            ok = slots > 0
            prev[ok] = self.slot_intensity(slots[ok] - 1) * arm
            mean = np.maximum(0.0, (prev + cur) / 4.0 - c * np.sqrt(prev * cur) / 2.0)
            p_sig = -np.expm1(-det.config.eta * mean)
            return 1.0 - (1.0 - p_sig) * (1.0 - det.dark), p_sig

        return det.run(start, stop, p_max, prob, self.rng)

    # -- aggregated probes (initialisation scans) ------------------------
    def class_fractions(self, start_frame: int, n_frames: int = 200_000) -> np.ndarray:
        counts = count_position_classes(self.stream.symbols(start_frame, start_frame + n_frames))
        return counts / counts.sum()

    def _live_fraction(self, det: DetectorModel, p_mean: float) -> float:
        if det.dead == 0 and det.p_ap == 0:
            return 1.0
        rate, _ = secmath.renewal_stats(p_mean, det.dead, det.p_ap, det.q)
        return max(0.0, 1.0 - rate * det.dead)

    def probe_monitor(self, start: int, n_slots: int, fractions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Monitor counts over ``n_slots`` drawn from per-class binomials.

        Returns (clicks, live positions), each split by position class
        (DARK, NI, INT).  Used for the wavelength scan, where the dwell is far
        too long for slot-level simulation; the split stands in for Alice's
        classification of the announced click list.
        """
        det = self.monitor
        time = start / self.params.slot_rate
        if self.light_on:
            arm = (1.0 - self.params.data_split) * self.params.monitor_path_transmission * self.window_efficiency()
            means = secmath.monitor_intensities(self.params, self.t, self.phase_error(time), self.visibility(time))
            scale = arm / ((1.0 - self.params.data_split) * self.params.monitor_path_transmission)
            mean = np.array([means["dark"], means["ni"], means["int"]]) * scale
        else:
            mean = np.zeros(3)
        p = det.click_prob(mean)
        live = n_slots * self._live_fraction(det, float(np.dot(fractions, p)))
        n_class = np.floor(live * np.asarray(fractions)).astype(np.int64)
        clicks = np.array([self.rng.binomial(int(n), float(pc)) for n, pc in zip(n_class, p)], dtype=np.int64)
        return clicks, n_class

    def probe_data(self, start: int, n_slots: int, delay: float, fractions_lit: float) -> tuple[int, float]:
        """Data-line counts for window setting ``delay`` over ``n_slots`` (binomial)."""
        det = self.data
        if self.light_on:
            gain = self.params.data_split * self.window_efficiency(delay) * self.t
            p_lit = float(det.click_prob(self.emitter.mu * gain))
            p_empty = float(det.click_prob(self.emitter.residual * gain))
        else:
            p_lit = p_empty = det.dark
        p_mean = fractions_lit * p_lit + (1 - fractions_lit) * p_empty
        live = n_slots * self._live_fraction(det, p_mean)
        n_lit = int(live * fractions_lit)
        n_empty = int(live) - n_lit
        clicks = int(self.rng.binomial(n_lit, p_lit) + self.rng.binomial(n_empty, p_empty))
        return clicks, float(n_lit + n_empty)

    def pattern_clicks(self, pattern: np.ndarray, repeats: int) -> np.ndarray:
        """Data clicks (Bob's clock, modulo the pattern) for a repeated on/off pattern.

        Each pattern slot carries ``mu`` when the pattern bit is set.  The
        channel delay shifts where Bob sees the pattern.
        """
        det = self.data
        L = pattern.size
        gain = self.params.data_split * self.window_efficiency() * self.t
        p_on = float(det.click_prob(self.emitter.mu * gain))
        p_off = float(det.click_prob(self.emitter.residual * gain))
        probs = np.where(pattern > 0, p_on, p_off)
        start = 0
        stop = L * repeats
        p_max = max(p_on, p_off)
        state = DetectorState()
        model = DetectorModel(det.config, det.slot_rate, state)

        def prob(slots):
            p = probs[slots % L]
            return p, np.zeros_like(p)

        clicks = model.run(start, stop, p_max, prob, self.rng)
        return (clicks.slots + self.channel.delay_slots) % L
