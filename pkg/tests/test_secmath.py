import math
import time

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from cowqkd.params import get_preset
from cowqkd.secmath import (DomainError, LinkBudget, binary_entropy, db_to_transmission, eve_information,
                            predict_rates, renewal_stats, secret_fraction, security_estimate,
                            transmission_to_db)

mpmath.mp.dps = 40

unit = st.floats(0.0, 1.0, allow_nan=False)
mus = st.floats(1e-4, 0.999, allow_nan=False)


def h_ref(q):
    q = mpmath.mpf(q)
    if q in (0, 1):
        return mpmath.mpf(0)
    return -q * mpmath.log(q, 2) - (1 - q) * mpmath.log(1 - q, 2)


def i_ae_ref(mu, t, v):
    mu, t, v = (mpmath.mpf(x) for x in (mu, t, v))
    return mu * (1 - t) + (1 - v) * (1 + mpmath.exp(-mu)) / (2 * mpmath.exp(-mu))


def r_ref(mu, t, v, q):
    return max(mpmath.mpf(0), 1 - h_ref(q) - i_ae_ref(mu, t, v))


def rel_err(got, ref):
    ref = float(ref)
    if ref == 0.0:
        return abs(got)
    return abs(got - ref) / abs(ref)


# frozen examples


@pytest.mark.parametrize("q, expected", [(0.0, 0.0), (0.5, 1.0), (1.0, 0.0)])
def test_entropy_limits(q, expected):
    assert binary_entropy(q) == expected


def test_entropy_at_five_percent():
    assert binary_entropy(0.05) == pytest.approx(0.28640, abs=5e-6)


def test_eve_information_examples():
    assert eve_information(0.3, 1.0, 1.0) == 0.0
    assert eve_information(0.5, 0.5, 1.0) == pytest.approx(0.25, abs=1e-15)
    assert eve_information(0.5, 10 ** -4.3, 0.95) == pytest.approx(0.5662, abs=1e-4)


def test_secret_fraction_examples():
    assert secret_fraction(0.5, 1.0, 1.0, 0.0) == 1.0
    assert secret_fraction(0.5, 10 ** -4.3, 0.95, 0.05) == pytest.approx(0.147, abs=5e-4)
    # 1 - h(0.15) - I_AE is negative here, so the fraction clamps to zero
    assert 1 - binary_entropy(0.15) - eve_information(0.5, 10 ** -4.3, 0.80) < 0
    assert secret_fraction(0.5, 10 ** -4.3, 0.80, 0.15) == 0.0


def test_security_estimate_bundles_terms():
    est = security_estimate(0.5, 10 ** -4.3, 0.95, 0.05)
    assert est.eve_info == eve_information(0.5, 10 ** -4.3, 0.95)
    assert est.secret_fraction == secret_fraction(0.5, 10 ** -4.3, 0.95, 0.05)


@pytest.mark.parametrize("loss, t", [(0.0, 1.0), (3.0, 0.5012), (43.0, 5.01e-5)])
def test_db_to_transmission(loss, t):
    assert db_to_transmission(loss) == pytest.approx(t, rel=1e-3)


def test_link_budget_from_distance():
    b = LinkBudget.from_distance(100.0)
    assert b.loss_db == pytest.approx(21.0)
    assert b.transmission == pytest.approx(10 ** -2.1)


# domain errors


@pytest.mark.parametrize("q", [-0.01, 1.01, math.nan])
def test_entropy_rejects_out_of_domain(q):
    with pytest.raises(DomainError):
        binary_entropy(q)


@pytest.mark.parametrize("args", [(0.0, 0.5, 1.0), (-1.0, 0.5, 1.0), (0.5, 1.5, 1.0), (0.5, 0.5, 1.2)])
def test_eve_information_rejects_out_of_domain(args):
    with pytest.raises(DomainError):
        eve_information(*args)


def test_negative_loss_rejected():
    with pytest.raises(DomainError):
        db_to_transmission(-1.0)
    with pytest.raises(DomainError):
        transmission_to_db(0.0)
    with pytest.raises(DomainError):
        LinkBudget.from_distance(-5.0)


# high-precision oracle


def test_oracle_grid_1000_points():
    rng = np.random.default_rng(2024)
    qs = np.concatenate([[0.0, 0.5, 1e-12, 0.999999], rng.uniform(0, 1, 996)])
    mu = rng.uniform(0.01, 0.99, 1000)
    t = 10 ** (-rng.uniform(0, 6, 1000))
    v = rng.uniform(0.5, 1.0, 1000)
    q = rng.uniform(0, 0.5, 1000)

    start = time.perf_counter()
    got_h = [binary_entropy(float(x)) for x in qs]
    got_i = [eve_information(*map(float, a)) for a in zip(mu, t, v)]
    got_r = [secret_fraction(*map(float, a)) for a in zip(mu, t, v, q)]
    elapsed = time.perf_counter() - start

    assert max(rel_err(g, h_ref(x)) for g, x in zip(got_h, qs)) < 1e-10
    assert max(rel_err(g, i_ae_ref(*a)) for g, a in zip(got_i, zip(mu, t, v))) < 1e-10
    errs = []
    for g, a in zip(got_r, zip(mu, t, v, q)):
        ref = r_ref(*a)
        # a clamped value must be exactly zero; near-cancellation is checked absolutely
        errs.append(rel_err(g, ref) if ref > 1e-6 else abs(g - float(ref)))
    assert max(errs) < 1e-10
    assert elapsed < 1.0


# properties


@given(unit)
def test_entropy_symmetric(q):
    assert binary_entropy(q) == pytest.approx(binary_entropy(1 - q), abs=1e-12)


@given(st.floats(0.0, 0.5), st.floats(0.0, 0.5))
def test_entropy_increasing_below_half(a, b):
    lo, hi = sorted((a, b))
    assert binary_entropy(lo) <= binary_entropy(hi) + 1e-15


@given(st.floats(0.0, 200.0))
def test_db_round_trip(loss):
    assert transmission_to_db(db_to_transmission(loss)) == pytest.approx(loss, abs=1e-9)


@given(mus, unit, unit, unit)
def test_eve_information_monotone(mu, t, v, dv):
    # more loss or lower visibility never reduces Eve's information
    assert eve_information(mu, t * 0.5, v) >= eve_information(mu, t, v) - 1e-15
    assert eve_information(mu, t, v * (1 - dv)) >= eve_information(mu, t, v) - 1e-15


@given(mus, unit, unit, st.floats(0.0, 0.5))
def test_secret_fraction_bounded(mu, t, v, q):
    r = secret_fraction(mu, t, v, q)
    assert 0.0 <= r <= 1.0
    assert secret_fraction(mu, t, v, q, f_ec=1.15) <= r


# rate predictor


def test_apd_saturates_at_21_db():
    pred = predict_rates(get_preset("apd", loss_db=21.0))
    assert pred.saturated
    # raw click rate sits just under the 1/dead_time ceiling (~33 kHz)
    assert 2.5e4 < pred.raw_rate <= pred.ceiling
    assert pred.ceiling == pytest.approx(1 / 30e-6)


def test_no_signal_limit():
    pred = predict_rates(get_preset("apd", loss_db=21.0), t=0.0)
    assert pred.qber == pytest.approx(0.5)
    assert pred.secret_rate == 0.0
    assert pred.secret_rate_ec == 0.0
    assert pred.sifted_rate > 0  # dark counts still sift


def test_sspd_field_point_order_of_magnitude():
    pred = predict_rates(get_preset("sspd", loss_db=43.0))
    assert 0.25 <= pred.secret_rate_ec <= 25.0
    assert 0.03 <= pred.qber <= 0.07


def test_ideal_channel_is_error_free():
    pred = predict_rates(get_preset("ideal"))
    assert pred.qber == 0.0
    assert pred.errors_per_slot == 0.0


def test_dead_time_only_lowers_rates():
    p = get_preset("apd", loss_db=6.0)
    assert predict_rates(p).sifted_rate < predict_rates(p, dead_time=False).sifted_rate


def test_renewal_without_dead_time_is_bernoulli():
    rate, ap = renewal_stats(0.01, 0, 0.0, 0.0)
    assert rate == pytest.approx(0.01)
    assert ap == 0.0


@given(st.floats(1e-6, 0.5), st.integers(0, 20000))
def test_renewal_rate_below_ceiling(p, dead):
    rate, _ = renewal_stats(p, dead, 0.0, 0.0)
    assert rate <= 1.0 / (1 + dead) + 1e-15
    assert rate <= p + 1e-15
