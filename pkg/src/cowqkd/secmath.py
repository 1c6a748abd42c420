"""Security bound, entropy, unit conversions and the closed-form rate predictor.

Everything here is a pure function of its arguments.  The rate predictor is
the analytic oracle the Monte Carlo link is checked against, so it models the
same physics: Poisson photon statistics per slot, merged dark counts, a
non-paralysable dead time of a whole number of slots, and afterpulses with an
exponentially distributed delay after the dead time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .params import DetectorConfig, SystemParams

# Long-run decoy fraction of the clear-on-match "1010" rule on unbiased bits:
# the mean waiting time for 1010 in a fresh sequence is 2**4 + 2**2 = 20.
RULE_DECOY_FRACTION = 1.0 / 20.0


class DomainError(ValueError):
    """Argument outside the mathematical domain of a formula."""


@dataclass(frozen=True)
class LinkBudget:
    loss_db: float
    transmission: float
    fiber_km: float

    @classmethod
    def from_loss(cls, loss_db: float, attenuation_db_per_km: float = 0.21) -> "LinkBudget":
        return cls(loss_db, db_to_transmission(loss_db), loss_db / attenuation_db_per_km)

    @classmethod
    def from_distance(cls, fiber_km: float, attenuation_db_per_km: float = 0.21) -> "LinkBudget":
        if fiber_km < 0:
            raise DomainError("fiber length must be non-negative")
        loss = attenuation_db_per_km * fiber_km
        return cls(loss, db_to_transmission(loss), fiber_km)


@dataclass(frozen=True)
class SecurityEstimate:
    mu: float
    visibility: float
    qber: float
    eve_info: float
    secret_fraction: float


@dataclass(frozen=True)
class RatePrediction:
    """Expected link performance. Rates are in events per second."""

    sifted_rate: float
    qber: float
    secret_rate: float  # ideal error correction, cost h(Q)
    secret_rate_ec: float  # cost f_EC * h(Q)
    saturated: bool
    raw_rate: float  # accepted data-line clicks per second
    incoming_rate: float  # data-line clicks per second without dead time
    ceiling: float  # 1 / dead_time (inf for no dead time)
    afterpulse_fraction: float
    eve_info: float
    secret_fraction: float
    secret_fraction_ec: float
    sifted_per_slot: float
    errors_per_slot: float


def binary_entropy(q: float) -> float:
    if not 0.0 <= q <= 1.0 or math.isnan(q):
        raise DomainError(f"binary entropy needs q in [0, 1], got {q}")
    if q == 0.0 or q == 1.0:
        return 0.0
    p = 1.0 - q
    # log1p where the argument of log is close to 1, so neither end loses digits
    log_q = math.log(q) if q < 0.5 else math.log1p(-p)
    log_p = math.log1p(-q) if q < 0.5 else math.log(p)
    return -(q * log_q + p * log_p) / math.log(2.0)


def db_to_transmission(loss_db: float) -> float:
    if loss_db < 0 or math.isnan(loss_db):
        raise DomainError(f"loss must be non-negative, got {loss_db}")
    if math.isinf(loss_db):
        return 0.0
    return 10.0 ** (-loss_db / 10.0)


def transmission_to_db(t: float) -> float:
    if not 0.0 < t <= 1.0:
        raise DomainError(f"transmission must be in (0, 1], got {t}")
    return -10.0 * math.log10(t)


def _check_mu_t_v(mu: float, t: float, visibility: float) -> None:
    if not mu > 0:
        raise DomainError(f"mu must be positive, got {mu}")
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"transmission must be in [0, 1], got {t}")
    if not 0.0 <= visibility <= 1.0:
        raise DomainError(f"visibility must be in [0, 1], got {visibility}")


def eve_information(mu: float, t: float, visibility: float) -> float:
    """Eve's information per sifted bit: beam-splitting plus intercept-resend terms."""
    _check_mu_t_v(mu, t, visibility)
    bsa = mu * (1.0 - t)
    # (1 + e^-mu) / (2 e^-mu) == (e^mu + 1) / 2
    ir = (1.0 - visibility) * (math.exp(mu) + 1.0) / 2.0
    return bsa + ir


def secret_fraction(mu: float, t: float, visibility: float, qber: float, f_ec: float = 1.0) -> float:
    """Secret key fraction r, clamped at zero. ``f_ec`` scales the EC cost."""
    r = 1.0 - f_ec * binary_entropy(qber) - eve_information(mu, t, visibility)
    return max(0.0, r)


def security_estimate(mu: float, t: float, visibility: float, qber: float) -> SecurityEstimate:
    return SecurityEstimate(
        mu=mu,
        visibility=visibility,
        qber=qber,
        eve_info=eve_information(mu, t, visibility),
        secret_fraction=secret_fraction(mu, t, visibility, qber),
    )


def decoy_fraction_of(params: "SystemParams") -> float:
    return RULE_DECOY_FRACTION if params.decoy_fraction is None else params.decoy_fraction


def renewal_stats(p: float, dead_slots: int, p_ap: float, q: float) -> tuple[float, float]:
    """Click rate per slot and afterpulse-caused fraction for one detector.

    The detector clicks with probability ``p`` in every live slot.  A click
    blocks the next ``dead_slots`` slots, and with probability ``p_ap`` arms an
    afterpulse that fires ``k >= 0`` slots after the dead time with
    probability ``(1 - q) q**k``.  Clicks are renewal points, so the rate is
    one over the mean cycle length.
    """
    if p <= 0.0 and p_ap <= 0.0:
        return 0.0, 0.0
    if p <= 0.0:
        # only afterpulses, which need a first click to start
        return 0.0, 0.0
    s = 1.0 - p
    mean_wait = (1.0 - p_ap) * s / p
    if p_ap > 0.0:
        mean_wait += p_ap * s * q / (1.0 - s * q)
    rate = 1.0 / (1.0 + dead_slots + mean_wait)
    ap_fraction = p_ap * (1.0 - q) * s / (1.0 - q * s) if p_ap > 0.0 else 0.0
    return rate, ap_fraction


def _afterpulse_params(det: "DetectorConfig", slot_rate: float) -> tuple[float, float]:
    p_ap = det.afterpulse_total
    tau = det.afterpulse_decay * slot_rate
    q = math.exp(-1.0 / tau) if tau > 0 else 0.0
    return p_ap, q


def data_slot_probabilities(params: "SystemParams", t: float | None = None) -> tuple[float, float, float]:
    """Per-slot click probabilities on the data line: (mu slot, empty slot, dark only)."""
    t = params.transmission if t is None else t
    det = params.data_detector
    eta = det.eta * params.window_efficiency
    dark = det.dark_prob(params.slot_rate)
    lam_mu = eta * params.data_split * t * params.mu
    lam_e = eta * params.data_split * t * params.empty_residual
    p_mu = 1.0 - math.exp(-lam_mu) * (1.0 - dark)
    p_e = 1.0 - math.exp(-lam_e) * (1.0 - dark)
    return p_mu, p_e, dark


def predict_rates(params: "SystemParams", t: float | None = None, dead_time: bool = True) -> RatePrediction:
    """Closed-form sifted rate, QBER and secret rate for ``params``.

    ``t`` overrides the transmission (``t=0`` gives the dark-count limit);
    ``dead_time=False`` drops the dead time and afterpulses from the model,
    which is useful for deliberate model-mismatch checks.
    """
    t = params.transmission if t is None else t
    det = params.data_detector
    f_d = decoy_fraction_of(params)
    p_mu, p_e, _ = data_slot_probabilities(params, t)
    d_slots = det.dead_slots(params.slot_rate) if dead_time else 0
    p_ap, q = _afterpulse_params(det, params.slot_rate) if dead_time else (0.0, 0.0)

    frac_mu_bit = (1.0 - f_d) / 2.0
    frac_e_bit = (1.0 - f_d) / 2.0
    frac_mu_decoy = f_d
    h_mu = -math.log1p(-p_mu) if p_mu < 1.0 else math.inf
    h_e = -math.log1p(-p_e) if p_e < 1.0 else math.inf
    mean_hazard = (frac_mu_bit + frac_mu_decoy) * h_mu + frac_e_bit * h_e
    p_eff = -math.expm1(-mean_hazard)
    incoming_per_slot = (frac_mu_bit + frac_mu_decoy) * p_mu + frac_e_bit * p_e

    if d_slots == 0 and p_ap == 0.0:
        # exact frame-level accounting; double clicks in a frame are discarded
        raw_per_slot = incoming_per_slot
        ap_frac = 0.0
        sifted_per_frame = (1.0 - f_d) * (p_mu * (1.0 - p_e) + p_e * (1.0 - p_mu))
        errors_per_frame = (1.0 - f_d) * p_e * (1.0 - p_mu)
        sifted_per_slot = sifted_per_frame / 2.0
        errors_per_slot = errors_per_frame / 2.0
    else:
        raw_per_slot, ap_frac = renewal_stats(p_eff, d_slots, p_ap, q)
        w_c = frac_mu_bit * h_mu
        w_w = frac_e_bit * h_e
        w_d = frac_mu_decoy * h_mu
        w = w_c + w_w + w_d
        if w > 0:
            sig_sifted = (w_c + w_w) / w
            sig_err = w_w / w
        else:
            sig_sifted = sig_err = 0.0
        sifted_per_slot = raw_per_slot * ((1.0 - ap_frac) * sig_sifted + ap_frac * (1.0 - f_d))
        errors_per_slot = raw_per_slot * ((1.0 - ap_frac) * sig_err + ap_frac * (1.0 - f_d) / 2.0)

    sifted_rate = sifted_per_slot * params.slot_rate
    qber = errors_per_slot / sifted_per_slot if sifted_per_slot > 0 else 0.5
    qber = min(max(qber, 0.0), 0.5)
    i_ae = eve_information(params.mu, t, params.visibility)
    r = max(0.0, 1.0 - binary_entropy(qber) - i_ae)
    r_ec = max(0.0, 1.0 - params.f_ec * binary_entropy(qber) - i_ae)
    ceiling = 1.0 / det.dead_time if (dead_time and det.dead_time > 0) else math.inf
    incoming_rate = incoming_per_slot * params.slot_rate
    return RatePrediction(
        sifted_rate=sifted_rate,
        qber=qber,
        secret_rate=sifted_rate * r,
        secret_rate_ec=sifted_rate * r_ec,
        saturated=bool(incoming_per_slot * d_slots >= 1.0),
        raw_rate=raw_per_slot * params.slot_rate,
        incoming_rate=incoming_rate,
        ceiling=ceiling,
        afterpulse_fraction=ap_frac,
        eve_info=i_ae,
        secret_fraction=r,
        secret_fraction_ec=r_ec,
        sifted_per_slot=sifted_per_slot,
        errors_per_slot=errors_per_slot,
    )


def monitor_intensities(params: "SystemParams", t: float | None = None, phase: float = 0.0,
                        visibility: float | None = None) -> dict[str, float]:
    """Mean photon number at the monitor detector for each position class.

    Classes name the pair of pulses overlapped by the interferometer:
    ``"int"`` (two non-empty pulses), ``"ni"`` (exactly one) and ``"dark"``
    (two empty slots).
    """
    t = params.transmission if t is None else t
    v = params.visibility if visibility is None else visibility
    arm = t * (1.0 - params.data_split) * params.monitor_path_transmission
    i_m = params.mu * arm
    i_e = params.empty_residual * arm
    c = v * math.cos(phase)

    def mix(a: float, b: float) -> float:
        return max(0.0, (a + b) / 4.0 - c * math.sqrt(a * b) / 2.0)

    return {"int": mix(i_m, i_m), "ni": mix(i_m, i_e), "dark": mix(i_e, i_e)}
