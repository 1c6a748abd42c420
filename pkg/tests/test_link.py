"""Bulk link engine against the closed-form predictor and the slot-by-slot receiver."""
import math

import numpy as np
import pytest

from cowqkd.channel import ChannelConfig
from cowqkd.harness import Z_LIMIT, _z_scores
from cowqkd.link import (POS_DARK, POS_INT, POS_NI, DetectorModel, QuantumLink, count_position_classes,
                         position_class)
from cowqkd.params import PRESETS, get_preset, sspd_detector
from cowqkd.randomness import SeedSource, SegmentGenerator, Symbol
from cowqkd.receiver import DetectorState, detect_data
from cowqkd.secmath import predict_rates

LOSSES = (0.0, 6.0, 12.0, 21.0, 31.0)


@pytest.mark.parametrize("preset", sorted(PRESETS))
@pytest.mark.parametrize("loss", LOSSES)
def test_sifted_rate_and_qber_match_prediction(preset, loss, link_sift):
    slots = 10**7
    n, errors, _ = link_sift(preset, loss, slots)
    zs, zq = _z_scores(n, errors, slots, predict_rates(get_preset(preset, loss_db=loss)))
    assert abs(zs) <= Z_LIMIT
    assert abs(zq) <= Z_LIMIT


def test_ideal_link_has_no_errors(link_sift):
    n, errors, _ = link_sift("ideal", 0.0, 10**6)
    assert n > 0 and errors == 0


def test_dark_only_qber_is_half():
    params = get_preset("apd", loss_db=21.0)
    gen = SegmentGenerator(SeedSource(1))
    link = QuantumLink(params, gen, np.random.default_rng(1))
    link.light_on = False
    data, _ = link.simulate(0, 10**9)
    frames = data.slots // 2
    sym = gen.symbols_at(frames)
    keep = sym != Symbol.DECOY
    bob = (data.slots[keep] % 2 == 0)
    q = np.mean(bob != sym[keep])
    assert abs(q - 0.5) < 4 * math.sqrt(0.25 / keep.sum())


def test_bulk_engine_matches_slot_by_slot_receiver():
    # same click probability per slot: compare click counts of the two engines
    det = sspd_detector(efficiency=0.1, dark_rate=2e6)
    slot_rate = 625e6
    n = 300_000
    p = -math.expm1(-0.1 * 0.02) * (1 - det.dark_prob(slot_rate)) + det.dark_prob(slot_rate)

    state, rng = DetectorState(), np.random.default_rng(3)
    slow = sum(detect_data(s, 0.02, state, det, rng, slot_rate) is not None for s in range(n))

    model = DetectorModel(det, slot_rate)
    fast = len(model.run(0, n, p, lambda s: (np.full(s.size, p), np.zeros(s.size)), np.random.default_rng(4)))
    sigma = math.sqrt(2 * n * p * (1 - p))
    assert abs(slow - fast) < 4 * sigma


def test_bulk_engine_respects_dead_time():
    det = get_preset("apd").data_detector
    model = DetectorModel(det, 625e6)
    clicks = model.run(0, 10**8, 0.5, lambda s: (np.full(s.size, 0.5), np.full(s.size, 0.5)),
                       np.random.default_rng(5))
    assert np.all(np.diff(clicks.slots) > model.dead)


def test_position_classes():
    # BIT1 BIT0 DECOY -> lit slots 1 0 | 0 1 | 1 1
    gen_syms = np.array([Symbol.BIT1, Symbol.BIT0, Symbol.DECOY], dtype=np.uint8)
    counts = count_position_classes(gen_syms)
    # pairs: (1,0) (0,0) (0,1) (1,1) (1,1)
    assert list(counts) == [1, 2, 2]

    gen = SegmentGenerator(SeedSource(2))
    sym = gen.symbols(0, 1000)
    lit = np.array([[0, 1], [1, 0], [1, 1]])[sym].reshape(-1)
    slots = np.arange(1, 2000)
    expected = lit[slots] + lit[slots - 1]
    assert np.array_equal(position_class(gen, slots), expected)
    assert {POS_DARK, POS_NI, POS_INT} == {0, 1, 2}


def test_link_is_deterministic():
    def clicks(seed):
        params = get_preset("apd", loss_db=12.0)
        link = QuantumLink(params, SegmentGenerator(SeedSource(seed)), np.random.default_rng(seed))
        d, m = link.simulate(0, 10**7)
        return d.slots, m.slots

    a, b = clicks(1), clicks(1)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_channel_delay_shifts_bob_clock():
    params = get_preset("ideal")

    def first_clicks(delay):
        gen = SegmentGenerator(SeedSource(1))
        ch = ChannelConfig.from_params(params, delay_slots=delay)
        link = QuantumLink(params, gen, np.random.default_rng(1), ch)
        return link.simulate(0, 10**5)[0].slots

    assert np.array_equal(first_clicks(137), first_clicks(0) + 137)
