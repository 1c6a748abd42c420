"""Alice and Bob as message-driven coroutines.

Each endpoint is a generator that yields :class:`Send` to put a message on
the classical channel and :data:`RECV` to block for the next incoming one.
Messages are the only coupling, and every endpoint reads them in arrival
order, so any scheduler that preserves per-direction order produces the same
run.

Bob also owns the simulated quantum link.  Alice's emitter settings (sync
pattern, laser phase setpoint, laser on/off) reach it through the messages
that announce them.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from typing import Generator, Optional

import numpy as np

from .. import secmath
from ..distill import (AuthKeyPool, AuthPoolExhausted, KeyBlock, ParityOracle, ParityQuery, Shuffle,
                       ToeplitzSpec, VerifyQuery, authenticate, cascade_rounds, compute_output_length,
                       privacy_amplify, verify)
from ..distill.cascade import VERIFY_BITS
from ..link import POS_INT, POS_NI, QuantumLink, count_position_classes
from ..randomness import SeedSource, SegmentGenerator, Symbol
from ..wire import (ClassicalMessage, MessageType, RestartReason, WireError, decode_deltas, decode_varint,
                    encode_deltas, encode_varint, pack_bits, unpack_bits)
from .calibration import (AlignmentError, InsufficientCounts, ScanRefused, TuningError, align_offsets,
                          fit_fringe, tune_window, wavelength_scan)
from .state import ActorResult, BlockRecord, Phase, SessionConfig, SessionState, Verdict, WindowRecord
from .visibility import estimate_visibility

log = logging.getLogger(__name__)

M = MessageType
_D = struct.Struct("<d")
_Q = struct.Struct("<Q")
_SCAN, _WINDOW = 0, 1
_REQ, _VERIFY_REQ, _VERIFY_REPLY, _DONE = 0x80, 0xFF, 0x7F, 0xFE
_SAMPLE_SEGMENT = 4096
_SCAN_MAX_ERROR = 0.01


def _succession(errors: int, n: int) -> float:
    """QBER estimate that stays positive when no error was seen."""
    return (errors + 1) / (n + 2)


@dataclass(frozen=True)
class Send:
    msg: ClassicalMessage


class _Recv:
    def __repr__(self) -> str:
        return "RECV"


RECV = _Recv()


class Halt(Exception):
    def __init__(self, reason: RestartReason, local: bool):
        super().__init__(reason.name)
        self.reason = reason
        self.local = local


def auth_pools(cfg: SessionConfig) -> tuple[AuthKeyPool, AuthKeyPool]:
    """Fresh copies of the pre-shared pools (Alice-to-Bob, Bob-to-Alice)."""
    return (AuthKeyPool.from_seed(cfg.seed, cfg.auth_pool_bits, label=1),
            AuthKeyPool.from_seed(cfg.seed, cfg.auth_pool_bits, label=2))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def varint(self) -> int:
        v, self.pos = decode_varint(self.data, self.pos)
        return v

    def byte(self) -> int:
        if self.pos >= len(self.data):
            raise WireError("truncated payload")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def double(self) -> float:
        v = _D.unpack_from(self.data, self.pos)[0]
        self.pos += _D.size
        return v

    def u64(self) -> int:
        v = _Q.unpack_from(self.data, self.pos)[0]
        self.pos += _Q.size
        return v

    def bits(self) -> np.ndarray:
        b, self.pos = unpack_bits(self.data, self.pos)
        return b

    def deltas(self, count: int, base: int) -> np.ndarray:
        v, self.pos = decode_deltas(self.data, self.pos, count, base)
        return v


@dataclass
class _Window:
    index: int
    start: int
    bits: list
    frames: list
    slots: int = 0
    counts: np.ndarray = None
    visibility: float = math.nan
    sufficient: bool = False

    def take(self) -> tuple[np.ndarray, np.ndarray]:
        bits = np.concatenate(self.bits) if self.bits else np.empty(0, np.uint8)
        frames = np.concatenate(self.frames) if self.frames else np.empty(0, np.int64)
        return bits, frames


class Endpoint:
    role = "?"

    def __init__(self, cfg: SessionConfig):
        self.cfg = cfg
        self.params = cfg.params
        self.state = SessionState()
        a2b, b2a = auth_pools(cfg)
        self.out_pool, self.in_pool = (a2b, b2a) if self.role == "alice" else (b2a, a2b)
        self.events: list[dict] = []
        self.cursor = 0
        self.exchanged = 0
        self.windows: list[WindowRecord] = []
        self.blocks: list[BlockRecord] = []
        self.key_parts: list[np.ndarray] = []
        self.sifted_bits: list[np.ndarray] = []
        self.sifted_frames: list[np.ndarray] = []
        self.pending: Optional[_Window] = None
        self.current: Optional[_Window] = None
        self.committed: list[tuple[np.ndarray, np.ndarray, float, bool]] = []
        self.block_count = 0
        self.q_prev: Optional[float] = None
        # error count and size of everything corrected so far, for the next block's QBER guess
        self.ec_tally = [0, 0]
        self.rescans = 0
        self.halt_reason: Optional[str] = None
        self.setpoint = 0.0

    # -- plumbing --------------------------------------------------------
    @property
    def now(self) -> float:
        return self.cursor / self.params.slot_rate

    def event(self, name: str, **fields) -> None:
        self.events.append({"event": name, "slot": self.cursor, **fields})

    def enter(self, phase: Phase) -> None:
        if self.state.phase is not phase:
            self.state.phase = phase
            self.event("phase", phase=phase.value)

    def send(self, mtype: MessageType, payload: bytes):
        msg = ClassicalMessage(mtype, payload)
        if msg.needs_tag:
            msg = ClassicalMessage(mtype, payload, authenticate(msg.signed_bytes(), self.out_pool))
        yield Send(msg)

    def recv(self, *expected: MessageType):
        msg = yield RECV
        if msg.msg_type is M.RESTART:
            reason = RestartReason(msg.payload[0]) if msg.payload else RestartReason.SHUTDOWN
            raise Halt(reason, local=False)
        if expected and msg.msg_type not in expected:
            raise Halt(RestartReason.DESYNC, local=True)
        if msg.needs_tag and not verify(msg.signed_bytes(), msg.tag, self.in_pool):
            raise Halt(RestartReason.AUTH_FAILURE, local=True)
        return msg

    def run(self) -> Generator[object, Optional[ClassicalMessage], ActorResult]:
        try:
            yield from self.body()
            self.event("done")
        except AuthPoolExhausted:
            yield from self._halt(RestartReason.POOL_EXHAUSTED, local=True)
        except WireError:
            yield from self._halt(RestartReason.DESYNC, local=True)
        except Halt as h:
            yield from self._halt(h.reason, h.local)
        return self.result()

    def _halt(self, reason: RestartReason, local: bool):
        self.halt_reason = reason.name
        self.enter(Phase.HALTED)
        self.event("halt", reason=reason.name, local=local)
        if local:
            yield Send(ClassicalMessage(M.RESTART, bytes([reason])))

    def result(self) -> ActorResult:
        key = np.concatenate(self.key_parts) if self.key_parts else np.empty(0, np.uint8)
        bits = np.concatenate(self.sifted_bits) if self.sifted_bits else np.empty(0, np.uint8)
        frames = np.concatenate(self.sifted_frames) if self.sifted_frames else np.empty(0, np.int64)
        return ActorResult(self.role, self.state, self.halt_reason, key, self.blocks, self.windows,
                           self.events, bits, frames, self.exchanged, self.extra())

    def extra(self) -> dict:
        return {}

    # -- shared protocol logic ------------------------------------------
    def body(self):
        yield from self.align()
        yield from self.scan()
        yield from self.exchange()

    def exchange(self):
        self.enter(Phase.EXCHANGING)
        window_index = 0
        self.current = None
        while self.exchanged < self.cfg.exchange_slots:
            if self.current is None:
                self.current = _Window(window_index, self.cursor, [], [], 0, np.zeros(3, np.int64))
                window_index += 1
            start = self.cursor
            stop = start + min(self.cfg.round_slots, self.cfg.exchange_slots - self.exchanged)
            closes = yield from self.round(start, stop)
            self.cursor = stop
            self.exchanged += stop - start
            self.state.slots_sent += stop - start
            if closes:
                report = yield from self.window_verdict()
                last = self.exchanged >= self.cfg.exchange_slots
                ok = yield from self.apply_verdict(report, last)
                if not ok:
                    yield from self.scan(rescan=True)
                    self.enter(Phase.EXCHANGING)

    def apply_verdict(self, report: WindowRecord, last: bool):
        win = self.current
        self.current = None
        self.windows.append(report)
        self.state.visibility_estimate = report.visibility
        self.state.visibility_interval = (report.low, report.high)
        self.setpoint = report.setpoint
        if report.verdict is Verdict.FAIL:
            dropped = [w.index for w in (self.pending, win) if w is not None]
            # a block must not straddle the bad interval: the partial block goes too
            partial = int(sum(c[0].size for c in self.committed))
            self.committed.clear()
            self.event("watchdog_fail", window=win.index, visibility=report.visibility, dropped=dropped,
                       partial_bits=partial)
            self.pending = None
            self.enter(Phase.REALIGNING)
            return False
        win.visibility = report.visibility
        win.sufficient = report.verdict is Verdict.PASS and report.n_eff >= self.cfg.watchdog_min
        if self.pending is not None:
            self.commit(self.pending)
        self.pending = win
        if last:
            self.commit(self.pending)
            self.pending = None
        while sum(c[0].size for c in self.committed) >= self.cfg.block_size:
            yield from self.distill_next()
        return True

    def commit(self, win: _Window) -> None:
        bits, frames = win.take()
        self.committed.append((bits, frames, win.visibility, win.sufficient))
        self.event("commit", window=win.index, bits=int(bits.size))

    def next_block(self) -> tuple[np.ndarray, np.ndarray, float, bool]:
        n = self.cfg.block_size
        bits, frames, vis, ok = [], [], [], []
        need = n
        while need:
            b, f, v, s = self.committed[0]
            take = min(need, b.size)
            bits.append(b[:take])
            frames.append(f[:take])
            vis.append(v)
            ok.append(s)
            if take == b.size:
                self.committed.pop(0)
            else:
                self.committed[0] = (b[take:], f[take:], v, s)
            need -= take
        measured = [v for v, s in zip(vis, ok) if s]
        visibility = min(measured) if measured else self.params.visibility
        return np.concatenate(bits), np.concatenate(frames), visibility, all(ok)

    def output_length(self, n: int, leak: int, visibility: float) -> int:
        i_ae = secmath.eve_information(self.params.mu, self.params.transmission, visibility)
        return compute_output_length(n, leak, i_ae, self.cfg.safety_bits)

    def record_block(self, kb: KeyBlock, frames: np.ndarray) -> None:
        rec = BlockRecord(kb.block_id, kb.n, kb.leak_ec, kb.m, kb.verified, kb.qber, kb.visibility,
                          kb.security_verified, int(frames.min()), int(frames.max()), self.now, frames)
        self.blocks.append(rec)
        if kb.verified and kb.final is not None:
            self.key_parts.append(kb.final)
        self.event("block", block=kb.block_id, n=kb.n, leak=kb.leak_ec, m=kb.m, verified=kb.verified,
                   qber=kb.qber, visibility=kb.visibility, secure=kb.security_verified,
                   first_frame=rec.first_frame, last_frame=rec.last_frame)


class Alice(Endpoint):
    role = "alice"

    def __init__(self, cfg: SessionConfig, seed_source=None):
        super().__init__(cfg)
        self.gen = SegmentGenerator(seed_source or SeedSource(cfg.seed), decoy_fraction=self.params.decoy_fraction)
        self.rng = np.random.default_rng([cfg.seed, 3])
        self.phi0 = 0.0
        self.class_counts = np.zeros(3, np.int64)
        self.tracking: dict[int, list[float]] = {1: [], -1: []}
        self.windows_since_scan = 0

    # -- (a) alignment ---------------------------------------------------
    def align(self):
        self.enter(Phase.INIT_ALIGN)
        repeats = self.cfg.pattern_repeats
        for attempt in range(self.cfg.align_attempts):
            pattern = self.rng.integers(0, 2, self.cfg.pattern_length, dtype=np.uint8)
            payload = (encode_varint(self.cursor) + encode_varint(pattern.size) + encode_varint(repeats)
                       + pack_bits(pattern))
            yield from self.send(M.SYNC_PATTERN, payload)
            rd = _Reader((yield from self.recv(M.SYNC_PATTERN)).payload)
            status, self.cursor = rd.byte(), rd.varint()
            self.event("align", attempt=attempt, status=status)
            if status == 0:
                return
            repeats *= 2
        raise Halt(RestartReason.SCAN_FAILED, local=False)

    # -- (c) wavelength scan ---------------------------------------------
    def scan(self, rescan: bool = False):
        self.enter(Phase.REALIGNING if rescan else Phase.INIT_WAVELENGTH)
        if rescan:
            self.rescans += 1
        start = self.cursor
        dwell = self.cfg.scan_dwell
        grid = np.arange(self.cfg.scan_points) * (2.0 * math.pi / self.cfg.scan_points)
        refusals = 0
        while True:
            payload = encode_varint(self.cursor) + encode_varint(dwell) + encode_varint(grid.size)
            payload += b"".join(_D.pack(p) for p in grid)
            yield from self.send(M.SCAN_STEP, payload)
            rd = _Reader((yield from self.recv(M.SCAN_STEP)).payload)
            self.cursor = rd.varint()
            rows = [[rd.varint() for _ in range(6)] for _ in range(grid.size + 1)]
            int_counts = {float(p): (r[POS_INT], r[3 + POS_INT]) for p, r in zip(grid, rows)}
            dark = rows[-1]
            verdict = Verdict.PASS
            grow = 2
            try:
                res = wavelength_scan(grid, lambda p: int_counts[p],
                                      lambda: (sum(dark[:3]), sum(dark[3:])),  # laser off: every class is background
                                      self.params.start_visibility, _SCAN_MAX_ERROR)
            except InsufficientCounts as short:
                res = short.result
                # jump straight to the dwell the fit's error says is needed
                need = (res.visibility_error / _SCAN_MAX_ERROR) ** 2 if math.isfinite(res.visibility_error) else 16.0
                grow = 1 << max(1, min(8, math.ceil(math.log2(1.2 * need))))
                if dwell * 2 <= self.cfg.scan_max_dwell:
                    verdict = Verdict.RETRY
                elif res.visibility + 2.0 * res.visibility_error >= self.params.start_visibility:
                    # longest dwell reached: start, flagged, if still consistent with the threshold
                    verdict = Verdict.UNVERIFIED
                else:
                    refusals += 1
                    verdict = Verdict.RETRY if refusals < self.cfg.scan_attempts else Verdict.REFUSED
            except ScanRefused as refused:
                res = refused.result
                refusals += 1
                verdict = Verdict.RETRY if refusals < self.cfg.scan_attempts else Verdict.REFUSED
            if rescan and self.rescans > self.cfg.max_rescans:
                verdict = Verdict.REFUSED
            if verdict in (Verdict.PASS, Verdict.UNVERIFIED):
                self.phi0 = res.phase
                self.tracking = {1: [], -1: []}
                self.windows_since_scan = 0
            next_dwell = min(dwell * grow, self.cfg.scan_max_dwell) if verdict is Verdict.RETRY else dwell
            setpoint = self._setpoint()
            payload = (bytes([_SCAN, verdict]) + _D.pack(res.visibility) + _D.pack(setpoint)
                       + encode_varint(next_dwell))
            yield from self.send(M.VIS_REPORT, payload)
            self.event("scan", dwell=dwell, visibility=res.visibility, phase=res.phase, verdict=verdict.name,
                       start=start)
            if verdict is Verdict.REFUSED:
                raise Halt(RestartReason.SCAN_FAILED, local=False)
            if verdict is not Verdict.RETRY:
                self.setpoint = setpoint
                self.state.phase_setpoint = self.phi0
                return
            dwell = next_dwell

    def _setpoint(self) -> float:
        if self.cfg.dither <= 0:
            return self.phi0
        sign = 1 if self.windows_since_scan % 2 == 0 else -1
        return self.phi0 + sign * self.cfg.dither

    # -- key exchange ----------------------------------------------------
    def round(self, start: int, stop: int):
        rd = _Reader((yield from self.recv(M.DETECT_ANNOUNCE)).payload)
        if (rd.varint(), rd.varint()) != (start, stop):
            raise Halt(RestartReason.DESYNC, local=True)
        frames = rd.deltas(rd.varint(), start // 2)
        rd = _Reader((yield from self.recv(M.DM_ANNOUNCE)).payload)
        dm_slots = rd.deltas(rd.varint(), start)
        if frames.size and (frames[0] < start // 2 or frames[-1] >= stop // 2):
            raise Halt(RestartReason.DESYNC, local=True)
        symbols = self.gen.symbols_at(frames)
        decoy = symbols == Symbol.DECOY
        keep = ~decoy
        win = self.current
        # pre-sifting: everything not announced is dropped; decoys go too
        bits, kept = symbols[keep].astype(np.uint8), frames[keep]
        win.bits.append(bits)
        win.frames.append(kept)
        self.sifted_bits.append(bits)
        self.sifted_frames.append(kept)
        self.state.detections += int(frames.size)
        self.state.decoys_removed += int(decoy.sum())
        # monitor bookkeeping
        if dm_slots.size:
            classes = self._classify(dm_slots[(dm_slots >= 0) & (dm_slots < stop)])
            win.counts += np.bincount(classes, minlength=3)[:3]
        first = start // 2
        sample = self.gen.symbols(first, first + min(_SAMPLE_SEGMENT, (stop - start) // 2))
        self.class_counts += count_position_classes(sample)
        win.slots += stop - start
        closes = (self.exchanged + (stop - start) >= self.cfg.exchange_slots
                  or win.slots >= self.cfg.window_max_slots
                  or self._decisive(self._window_estimate(win)))
        yield from self.send(M.DECOY_REMOVE, bytes([1 if closes else 0]) + pack_bits(decoy))
        return closes

    def _classify(self, slots: np.ndarray) -> np.ndarray:
        from ..link import slot_lit
        from .visibility import classify_positions

        return classify_positions(slots, lambda s: slot_lit(self.gen, s))

    def _window_estimate(self, win: _Window):
        fractions = self.class_counts / max(1, self.class_counts.sum())
        return estimate_visibility(win.counts, fractions * win.slots, self.params.extinction_ratio)

    def _decisive(self, est) -> bool:
        """Enough statistics for the watchdog to act on this estimate."""
        return est.n_eff >= self.cfg.watchdog_min and est.half_width <= self.cfg.window_precision

    def window_verdict(self):
        win = self.current
        est = self._window_estimate(win)
        acting = self._decisive(est)
        if acting and est.value < self.params.keep_visibility:
            verdict = Verdict.FAIL
        elif acting:
            verdict = Verdict.PASS
        else:
            verdict = Verdict.UNVERIFIED
        if verdict is not Verdict.FAIL:
            self._track(est)
        self.windows_since_scan += 1
        setpoint = self._setpoint()
        payload = (bytes([_WINDOW, verdict]) + _D.pack(est.value) + _D.pack(est.low) + _D.pack(est.high)
                   + _D.pack(est.n_eff) + _D.pack(setpoint))
        yield from self.send(M.VIS_REPORT, payload)
        rec = WindowRecord(win.index, win.start, self.cursor, verdict, est.value, est.low, est.high,
                           est.n_eff, setpoint)
        self.event("window", window=win.index, verdict=verdict.name, visibility=est.value, n_eff=est.n_eff,
                   start=win.start)
        return rec

    def _track(self, est) -> None:
        """Dithered proportional control of the phase setpoint."""
        if self.cfg.dither <= 0 or est.n_eff < self.cfg.watchdog_min:
            return
        sign = 1 if self.windows_since_scan % 2 == 0 else -1
        counts = np.asarray(est.counts, dtype=float)
        fractions = self.class_counts / max(1, self.class_counts.sum())
        rates = counts / np.maximum(fractions, 1e-12)
        bg = rates[0] if fractions[0] > 0 else 0.0
        if rates[POS_NI] - bg <= 0:
            return
        self.tracking[sign].append((rates[POS_INT] - bg) / (rates[POS_NI] - bg))
        if (self.windows_since_scan + 1) % self.cfg.tracking_every:
            return
        if self.tracking[1] and self.tracking[-1]:
            eps = 0.0 if math.isinf(self.params.extinction_ratio) else 1.0 / self.params.extinction_ratio
            diff = np.mean(self.tracking[1]) - np.mean(self.tracking[-1])
            err = diff * (1.0 + eps) / (4.0 * max(est.value, 0.5) * self.cfg.dither)
            err = min(max(err, -0.5), 0.5)
            self.phi0 -= self.cfg.tracking_gain * err
            self.state.phase_setpoint = self.phi0
            self.event("track", error=err, phase=self.phi0)
        self.tracking = {1: [], -1: []}

    # -- distillation (parity holder) -------------------------------------
    def distill_next(self):
        bits, frames, visibility, secure = self.next_block()
        block_id = self.block_count
        self.block_count += 1
        if self.q_prev is None:
            rd = _Reader((yield from self.recv(M.EC_SAMPLE)).payload)
            if rd.varint() != block_id:
                raise Halt(RestartReason.DESYNC, local=True)
            idx = rd.deltas(rd.varint(), 0)
            yield from self.send(M.EC_SAMPLE, encode_varint(block_id) + pack_bits(bits[idx]))
            mask = np.ones(bits.size, bool)
            mask[idx] = False
            bits, frames = bits[mask], frames[mask]
        oracle = ParityOracle(bits)
        leak = 0
        while True:
            msg = yield from self.recv(M.EC_SHUFFLE, M.EC_PARITY)
            rd = _Reader(msg.payload)
            kind = rd.byte()
            if rd.varint() != block_id:
                raise Halt(RestartReason.DESYNC, local=True)
            if msg.msg_type is M.EC_SHUFFLE:
                oracle.shuffle(kind, rd.u64())
            elif kind == _VERIFY_REQ:
                h = oracle.verify(rd.u64())
                hbits = np.array([(h >> (VERIFY_BITS - 1 - i)) & 1 for i in range(VERIFY_BITS)], np.uint8)
                leak += VERIFY_BITS
                yield from self.send(M.EC_PARITY, bytes([_VERIFY_REPLY]) + encode_varint(block_id) + pack_bits(hbits))
            elif kind == _DONE:
                verified = bool(rd.byte())
                errors = rd.varint()
                break
            else:
                ranges = []
                for _ in range(rd.varint()):
                    p, lo = rd.byte(), rd.varint()
                    ranges.append((p, lo, lo + rd.varint()))
                par = oracle.parities(ranges)
                leak += int(par.size)
                yield from self.send(M.EC_PARITY, bytes([kind & 0x7F]) + encode_varint(block_id) + pack_bits(par))
        n = int(bits.size)
        qber = errors / max(1, n)
        self.q_prev = qber
        kb = KeyBlock(block_id, n, bits, bits, leak, verified, qber=qber, visibility=visibility,
                      security_verified=secure)
        if verified:
            kb.m = self.output_length(n, leak, visibility)
            if kb.m > 0:
                spec = ToeplitzSpec.random(n, kb.m, self.rng)
                payload = struct.pack("<II", n, kb.m) + np.packbits(spec.seed).tobytes()
                yield from self.send(M.PA_SEED, payload)
                kb.final = privacy_amplify(bits, spec)
        self.record_block(kb, frames)


class Bob(Endpoint):
    role = "bob"

    def __init__(self, cfg: SessionConfig, seed_source=None):
        super().__init__(cfg)
        # the photons carry Alice's symbols, so the link needs a replica of her source
        replica = SegmentGenerator(seed_source or SeedSource(cfg.seed), decoy_fraction=self.params.decoy_fraction)
        self.link = QuantumLink(self.params, replica, np.random.default_rng([cfg.seed, 1]), cfg.channel_config())
        self.rng = np.random.default_rng([cfg.seed, 2])
        self.round_bits: Optional[np.ndarray] = None
        self.round_frames: Optional[np.ndarray] = None

    def extra(self) -> dict:
        return {"window_delay": self.link.window_delay, "clock_offset": self.link.clock_offset,
                "true_delay": self.link.channel.delay_slots}

    # -- (a) alignment and (b) window tuning ----------------------------
    def align(self):
        self.enter(Phase.INIT_ALIGN)
        for attempt in range(self.cfg.align_attempts):
            rd = _Reader((yield from self.recv(M.SYNC_PATTERN)).payload)
            self.cursor = rd.varint()
            length, repeats = rd.varint(), rd.varint()
            pattern = rd.bits()
            if pattern.size != length:
                raise Halt(RestartReason.DESYNC, local=True)
            clicks = self.link.pattern_clicks(pattern, repeats)
            self.cursor += length * repeats
            status = 0
            try:
                self.link.clock_offset = align_offsets(pattern, clicks)
                self.state.offset_slots = self.link.clock_offset
                self.enter(Phase.INIT_WINDOW)
                self.tune()
            except AlignmentError:
                status = 1
            except TuningError:
                status = 2
            self.event("align", attempt=attempt, status=status, offset=self.link.clock_offset)
            yield from self.send(M.SYNC_PATTERN, bytes([status]) + encode_varint(self.cursor))
            if status == 0:
                return
            self.enter(Phase.INIT_ALIGN)
        raise Halt(RestartReason.SCAN_FAILED, local=False)

    def tune(self) -> None:
        lit = self._lit_fraction()
        dwell = self.cfg.window_dwell
        while True:
            used = []

            def measure(delay: float) -> tuple[float, float]:
                counts, live = self.link.probe_data(self.cursor + sum(used), dwell, delay, lit)
                used.append(dwell)
                return counts, live

            try:
                delay = tune_window(self.cfg.window_range, self.cfg.window_step, measure)
                self.cursor += sum(used)
                break
            except TuningError:
                self.cursor += sum(used)
                if dwell * 2 > self.cfg.window_max_dwell:
                    raise
                dwell *= 2
        self.link.window_delay = delay
        self.state.window_delay = delay
        self.event("window_tuned", delay=delay, dwell=dwell)

    def _lit_fraction(self) -> float:
        from ..link import _LIT

        sym = self.link.stream.symbols(0, 200_000)
        return float(_LIT[sym].mean())

    # -- (c) wavelength scan (measurement side) ---------------------------
    def scan(self, rescan: bool = False):
        self.enter(Phase.REALIGNING if rescan else Phase.INIT_WAVELENGTH)
        if rescan:
            self.rescans += 1
        while True:
            rd = _Reader((yield from self.recv(M.SCAN_STEP)).payload)
            self.cursor = rd.varint()
            dwell = rd.varint()
            grid = [rd.double() for _ in range(rd.varint())]
            fractions = self.link.class_fractions(self.cursor // 2)
            out = bytearray()
            rows = []
            for phase in grid:
                self.link.phase_setpoint = phase
                rows.append(self.link.probe_monitor(self.cursor, dwell, fractions))
                self.cursor += dwell
            self.link.light_on = False
            rows.append(self.link.probe_monitor(self.cursor, dwell, fractions))
            self.link.light_on = True
            self.cursor += dwell
            for counts, opp in rows:
                for v in (*counts, *opp):
                    out += encode_varint(int(v))
            yield from self.send(M.SCAN_STEP, encode_varint(self.cursor) + bytes(out))
            rd = _Reader((yield from self.recv(M.VIS_REPORT)).payload)
            if rd.byte() != _SCAN:
                raise Halt(RestartReason.DESYNC, local=True)
            verdict = Verdict(rd.byte())
            visibility, setpoint = rd.double(), rd.double()
            rd.varint()
            self.event("scan", dwell=dwell, visibility=visibility, verdict=verdict.name)
            if verdict is Verdict.REFUSED:
                raise Halt(RestartReason.SCAN_FAILED, local=False)
            if verdict is not Verdict.RETRY:
                self.setpoint = setpoint
                self.link.phase_setpoint = setpoint
                self.state.phase_setpoint = setpoint
                return

    # -- key exchange ----------------------------------------------------
    def round(self, start: int, stop: int):
        self.link.phase_setpoint = self.setpoint
        data, monitor = self.link.simulate(start, stop)
        frames = data.slots // 2
        uniq, counts = np.unique(frames, return_counts=True)
        single = np.isin(frames, uniq[counts == 1])
        frames = frames[single]
        # a click in the first slot of a frame means the pulse led: bit 1
        bits = (data.slots[single] % 2 == 0).astype(np.uint8)
        payload = (encode_varint(start) + encode_varint(stop) + encode_varint(frames.size)
                   + encode_deltas(frames, base=start // 2))
        yield from self.send(M.DETECT_ANNOUNCE, payload)
        dm = monitor.slots
        yield from self.send(M.DM_ANNOUNCE, encode_varint(dm.size) + encode_deltas(dm, base=start))
        rd = _Reader((yield from self.recv(M.DECOY_REMOVE)).payload)
        closes = bool(rd.byte())
        decoy = rd.bits().astype(bool)
        if decoy.size != frames.size:
            raise Halt(RestartReason.DESYNC, local=True)
        win = self.current
        kept_bits, kept_frames = bits[~decoy], frames[~decoy]
        win.bits.append(kept_bits)
        win.frames.append(kept_frames)
        win.slots += stop - start
        self.sifted_bits.append(kept_bits)
        self.sifted_frames.append(kept_frames)
        self.state.detections += int(frames.size)
        self.state.decoys_removed += int(decoy.sum())
        return closes

    def window_verdict(self):
        rd = _Reader((yield from self.recv(M.VIS_REPORT)).payload)
        if rd.byte() != _WINDOW:
            raise Halt(RestartReason.DESYNC, local=True)
        verdict = Verdict(rd.byte())
        value, low, high, n_eff, setpoint = (rd.double() for _ in range(5))
        win = self.current
        self.event("window", window=win.index, verdict=verdict.name, visibility=value, n_eff=n_eff,
                   start=win.start)
        return WindowRecord(win.index, win.start, self.cursor, verdict, value, low, high, n_eff, setpoint)

    # -- distillation (corrector) ------------------------------------------
    def distill_next(self):
        bits, frames, visibility, secure = self.next_block()
        block_id = self.block_count
        self.block_count += 1
        bid = encode_varint(block_id)
        q_est = self.q_prev
        if q_est is None:
            k = max(1, int(math.ceil(self.cfg.sample_fraction * bits.size)))
            idx = np.sort(self.rng.choice(bits.size, size=k, replace=False))
            yield from self.send(M.EC_SAMPLE, bid + encode_varint(k) + encode_deltas(idx, strict=True))
            rd = _Reader((yield from self.recv(M.EC_SAMPLE)).payload)
            if rd.varint() != block_id:
                raise Halt(RestartReason.DESYNC, local=True)
            theirs = rd.bits()
            self.ec_tally = [int(np.sum(theirs != bits[idx])), k]
            q_est = _succession(*self.ec_tally)
            mask = np.ones(bits.size, bool)
            mask[idx] = False
            bits, frames = bits[mask], frames[mask]
        gen = cascade_rounds(bits, q_est, self.rng)
        reply = None
        while True:
            try:
                req = gen.send(reply)
            except StopIteration as stop:
                res = stop.value
                break
            reply = None
            if isinstance(req, Shuffle):
                yield from self.send(M.EC_SHUFFLE, bytes([req.pass_index]) + bid + _Q.pack(req.seed))
            elif isinstance(req, ParityQuery):
                current = max(r[0] for r in req.ranges)
                body = bytearray(bytes([_REQ | current]) + bid + encode_varint(len(req.ranges)))
                for p, lo, hi in req.ranges:
                    body += bytes([p]) + encode_varint(lo) + encode_varint(hi - lo)
                yield from self.send(M.EC_PARITY, bytes(body))
                rd = _Reader((yield from self.recv(M.EC_PARITY)).payload)
                if rd.byte() != current or rd.varint() != block_id:
                    raise Halt(RestartReason.DESYNC, local=True)
                reply = rd.bits()
                if reply.size != len(req.ranges):
                    raise Halt(RestartReason.DESYNC, local=True)
            elif isinstance(req, VerifyQuery):
                yield from self.send(M.EC_PARITY, bytes([_VERIFY_REQ]) + bid + _Q.pack(req.point))
                rd = _Reader((yield from self.recv(M.EC_PARITY)).payload)
                if rd.byte() != _VERIFY_REPLY or rd.varint() != block_id:
                    raise Halt(RestartReason.DESYNC, local=True)
                reply = int("".join(map(str, rd.bits().tolist())), 2)
        yield from self.send(M.EC_PARITY, bytes([_DONE]) + bid + bytes([int(res.verified)])
                             + encode_varint(res.errors_corrected))
        n = int(bits.size)
        if res.verified:
            self.ec_tally[0] += res.errors_corrected
            self.ec_tally[1] += n
        self.q_prev = _succession(*self.ec_tally)
        kb = KeyBlock(block_id, n, bits, res.bits, res.leak_ec, res.verified, qber=res.qber,
                      visibility=visibility, security_verified=secure)
        if res.verified:
            kb.m = self.output_length(n, res.leak_ec, visibility)
            if kb.m > 0:
                rd = _Reader((yield from self.recv(M.PA_SEED)).payload)
                n_seed, m_seed = struct.unpack_from("<II", rd.data, 0)
                if (n_seed, m_seed) != (n, kb.m):
                    raise Halt(RestartReason.DESYNC, local=True)
                seed = np.unpackbits(np.frombuffer(rd.data, np.uint8, offset=8))[: n + kb.m - 1]
                kb.final = privacy_amplify(res.bits, ToeplitzSpec(n, kb.m, seed))
        self.record_block(kb, frames)
