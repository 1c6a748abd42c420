import logging
import math
import threading
from dataclasses import replace

import numpy as np
import pytest

from cowqkd.channel import ChannelConfig
from cowqkd.distill import AuthKeyPool
from cowqkd.link import QuantumLink, count_position_classes, slot_lit
from cowqkd.params import get_preset
from cowqkd.randomness import SeedSource, SegmentGenerator
from cowqkd.secmath import LinkBudget
from cowqkd.session import (AlignmentError, InsufficientCounts, Phase, QueueTransport, ScanRefused,
                            SessionConfig, TuningError, align_offsets, classify_positions, drive,
                            estimate_visibility, run_inproc, tune_window, visibility_from_ratio,
                            wavelength_scan)
from cowqkd.session.actors import Alice, Bob
from cowqkd.wire import AUTHENTICATED, MessageType, RestartReason, decode_frame, encode_frame

# visibility estimator


def test_perfect_fringe_gives_exactly_one():
    est = estimate_visibility([0, 5000, 0], [0.25, 0.5, 0.25])
    assert est.value == 1.0
    assert est.high == 1.0
    assert est.low > 0.99


def test_ratio_inversion():
    assert visibility_from_ratio(0.0) == 1.0
    assert visibility_from_ratio(2.0) == 0.0
    assert visibility_from_ratio(2 * (1 - 0.95)) == pytest.approx(0.95)


@pytest.mark.parametrize("seed", range(10))
def test_estimator_recovers_095(seed):
    # with equal opportunities per class, INT/NI click ratio is 2 (1 - V)
    rng = np.random.default_rng(seed)
    n = 10**4
    counts = [0, rng.binomial(n, 0.4), rng.binomial(n, 0.4 * 2 * (1 - 0.95))]
    est = estimate_visibility(counts, [n, n, n])
    assert est.value == pytest.approx(0.95, abs=0.01)
    assert est.low <= est.value <= est.high


def test_estimator_interval_coverage_with_background():
    rng = np.random.default_rng(1)
    opp = np.array([0.25, 0.5, 0.25]) * 2e6
    bg, ni, v = 2e-4, 4e-4, 0.95
    p = np.array([bg, bg + ni, bg + 2 * ni * (1 - v)])
    hits = 0
    trials = 400
    for _ in range(trials):
        est = estimate_visibility(rng.binomial(opp.astype(int), p), opp)
        hits += est.low <= v <= est.high
    assert hits / trials > 0.92


def test_sspd_43db_window_is_insufficient():
    params = get_preset("sspd", loss_db=43.0)
    gen = SegmentGenerator(SeedSource(2))
    link = QuantumLink(params, gen, np.random.default_rng(2))
    slots = int(10 * params.slot_rate)  # a 10 s window
    counts = np.zeros(3, np.int64)
    for start in range(0, slots, 1 << 30):
        _, mon = link.simulate(start, min(slots, start + (1 << 30)))
        counts += np.bincount(classify_positions(mon.slots, lambda s: slot_lit(gen, s)), minlength=3)
    fractions = count_position_classes(gen.symbols(0, 200_000))
    est = estimate_visibility(counts, fractions / fractions.sum() * slots, params.extinction_ratio)
    assert not est.sufficient


# alignment and window tuning


def test_alignment_finds_channel_delay():
    params = get_preset("apd", loss_db=10.0)
    ch = ChannelConfig.from_params(params, delay_slots=137)
    link = QuantumLink(params, SegmentGenerator(SeedSource(1)), np.random.default_rng(1), ch)
    pattern = np.random.default_rng(2).integers(0, 2, 10_000).astype(np.uint8)
    assert align_offsets(pattern, link.pattern_clicks(pattern, 2000)) == 137


def test_zero_delay_aligns_to_zero():
    params = get_preset("apd", loss_db=10.0)
    link = QuantumLink(params, SegmentGenerator(SeedSource(1)), np.random.default_rng(1))
    pattern = np.random.default_rng(3).integers(0, 2, 10_000).astype(np.uint8)
    assert align_offsets(pattern, link.pattern_clicks(pattern, 2000)) == 0


def test_all_dark_alignment_fails():
    params = get_preset("apd", loss_db=10.0)
    ch = ChannelConfig(link=LinkBudget(math.inf, 0.0, math.inf))
    link = QuantumLink(params, SegmentGenerator(SeedSource(1)), np.random.default_rng(1), ch)
    pattern = np.random.default_rng(4).integers(0, 2, 10_000).astype(np.uint8)
    with pytest.raises(AlignmentError):
        align_offsets(pattern, link.pattern_clicks(pattern, 2000))
    with pytest.raises(AlignmentError):
        align_offsets(pattern, [])


def gaussian_window(peak, width=0.19, rate=1e-3, live=1e8, rng=np.random.default_rng(0)):
    def measure(delay):
        return rng.poisson(rate * live * math.exp(-0.5 * ((delay - peak) / width) ** 2)), live
    return measure


def test_tuning_finds_peak():
    assert tune_window((-0.5, 0.5), 0.1, gaussian_window(0.0)) == pytest.approx(0.0, abs=0.1)
    assert tune_window((-0.5, 0.5), 0.1, gaussian_window(0.23)) == pytest.approx(0.23, abs=0.1)


def test_tuning_monotone_response_returns_boundary(caplog):
    with caplog.at_level(logging.WARNING):
        assert tune_window((-0.5, 0.5), 0.1, gaussian_window(0.9, width=0.6)) == pytest.approx(0.5)
    assert "boundary" in caplog.text


def test_tuning_without_signal_fails():
    with pytest.raises(TuningError):
        tune_window((-0.5, 0.5), 0.1, lambda d: (0, 1e8))


# wavelength scan


def fringe(v, phi0, signal=2e-4, dark=1e-5, live=2e7, seed=0):
    rng = np.random.default_rng(seed)

    def measure(phi):
        return rng.poisson(live * (dark + signal * (1 - v * math.cos(phi - phi0)))), live

    def measure_dark():
        return rng.poisson(live * dark), live

    return measure, measure_dark


GRID = np.arange(16) * (2 * math.pi / 16)


def test_scan_finds_fringe():
    res = wavelength_scan(GRID, *fringe(0.98, 1.3))
    assert res.visibility == pytest.approx(0.98, abs=0.01)
    assert res.phase == pytest.approx(1.3, abs=0.05)
    assert res.visibility_error <= 0.01


def test_scan_refuses_low_visibility():
    with pytest.raises(ScanRefused) as info:
        wavelength_scan(GRID, *fringe(0.90, 0.0))
    assert info.value.result.visibility == pytest.approx(0.90, abs=0.02)


def test_scan_dark_only_is_insufficient():
    with pytest.raises(InsufficientCounts):
        wavelength_scan(GRID, *fringe(0.98, 0.0, signal=0.0, live=1e5))


def test_scan_grid_must_cover_fringe():
    with pytest.raises(ValueError):
        wavelength_scan(GRID[:8], *fringe(0.98, 0.0))


# whole sessions


def perfect_config(**kw):
    params = replace(get_preset("ideal"), decoy_fraction=0.0)
    return SessionConfig(params, seed=4, exchange_slots=4_000_000, round_slots=1 << 20, **kw)


def test_perfect_channel_sifts_identically():
    alice, bob = run_inproc(perfect_config())
    assert alice.halt_reason is None and bob.halt_reason is None
    assert alice.sifted_bits.size > 10_000
    assert np.array_equal(alice.sifted_bits, bob.sifted_bits)
    assert np.array_equal(alice.sifted_frames, bob.sifted_frames)
    assert all(b.qber == 0.0 and b.verified for b in alice.blocks)
    assert np.array_equal(alice.key, bob.key) and alice.key.size > 0


def test_session_walks_through_calibration_phases():
    # both start in INIT_ALIGN; only Bob tunes the detection window
    alice, bob = run_inproc(perfect_config())
    phases = [Phase(e["phase"]) for e in bob.events if e["event"] == "phase"]
    assert phases[:3] == [Phase.INIT_WINDOW, Phase.INIT_WAVELENGTH, Phase.EXCHANGING]
    assert abs(bob.extra["window_delay"]) < 0.1
    assert [Phase(e["phase"]) for e in alice.events if e["event"] == "phase"][:2] == phases[1:3]


def test_block_records_are_consistent():
    cfg = perfect_config()
    alice, bob = run_inproc(cfg)
    for a, b in zip(alice.blocks, bob.blocks):
        assert (a.block_id, a.n, a.leak_ec, a.m, a.verified) == (b.block_id, b.n, b.leak_ec, b.m, b.verified)
    # the first block gives up a sample for parameter estimation
    assert alice.blocks[0].n < alice.blocks[1].n == cfg.block_size
    assert alice.key.size == sum(b.m for b in alice.blocks if b.verified)


def test_apd_21db_sifted_rate_matches_prediction():
    from cowqkd.harness import ExperimentSpec, run_point

    point = run_point(ExperimentSpec("apd", (21.0,), 2 * 10**9, seed=2), 21.0)
    assert point.status == "ok"
    assert abs(point.z_sifted) <= 3 and abs(point.z_qber) <= 3
    assert point.keys_match


def run_tampered(cfg, mangle, endpoints=None):
    """Both endpoints in threads; ``mangle(sender, frame)`` may rewrite every frame in flight."""
    endpoints = endpoints or {"alice": Alice(cfg), "bob": Bob(cfg)}
    ta, tb = QueueTransport.pair()

    class Tampering:
        def __init__(self, inner, name):
            self.inner, self.name = inner, name

        def send(self, frame):
            self.inner.send(mangle(self.name, frame))

        def recv(self):
            return self.inner.recv()

        def close(self):
            self.inner.close()

    results = {}
    threads = [threading.Thread(target=lambda n=n, t=t: results.__setitem__(n, drive(endpoints[n], Tampering(t, n))))
               for n, t in (("alice", ta), ("bob", tb))]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=120)
    return results["alice"], results["bob"]


def flip_first(mtype):
    done = []

    def mangle(sender, frame):
        msg = decode_frame(frame)
        if msg.msg_type is mtype and not done:
            done.append(True)
            data = bytearray(frame)
            data[7] ^= 0x01  # first payload byte
            return bytes(data)
        return frame

    return mangle


def test_tampered_parity_message_halts_both():
    alice, bob = run_tampered(perfect_config(), flip_first(MessageType.EC_PARITY))
    reasons = {alice.halt_reason, bob.halt_reason}
    assert reasons == {RestartReason.AUTH_FAILURE.name}
    assert alice.state.phase is Phase.HALTED and bob.state.phase is Phase.HALTED


def test_unexpected_message_is_a_desync():
    def mangle(sender, frame):
        msg = decode_frame(frame)
        if sender == "bob" and msg.msg_type is MessageType.DM_ANNOUNCE:
            return encode_frame(type(msg)(MessageType.DECOY_REMOVE, msg.payload))
        return frame

    alice, bob = run_tampered(perfect_config(), mangle)
    assert alice.halt_reason == RestartReason.DESYNC.name
    assert bob.halt_reason == RestartReason.DESYNC.name


def test_wrong_preshared_key_fails_authentication():
    cfg = perfect_config()
    bob = Bob(cfg)
    bob.in_pool = AuthKeyPool.from_seed(12345, cfg.auth_pool_bits)
    alice, bob = run_inproc(cfg, endpoints={"alice": Alice(cfg), "bob": bob})
    assert RestartReason.AUTH_FAILURE.name in (alice.halt_reason, bob.halt_reason)
    # the first authenticated message already fails, before any block is distilled
    assert alice.key.size == 0 and bob.key.size == 0


def test_pool_exhaustion_halts_before_unauthenticated_message():
    cfg = perfect_config(auth_pool_bits=64 * 40)
    transcript = []
    alice, bob = run_inproc(cfg, transcript)
    assert RestartReason.POOL_EXHAUSTED.name in (alice.halt_reason, bob.halt_reason)
    # every distillation frame that went out carries a tag that verifies
    frames = [decode_frame(f) for _, f in transcript]
    assert all(m.tag is not None for m in frames if m.msg_type in AUTHENTICATED)
    assert frames[-1].msg_type is MessageType.RESTART or frames[-2].msg_type is MessageType.RESTART
