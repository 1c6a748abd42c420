"""Experiment runner: single points, loss sweeps, and the analytic cross-check.

Every point drives a full session (calibration, exchange, distillation) and
reports measured rates next to the closed-form prediction.  Rates are per
second of exchange-phase time, i.e. exchange slots divided by the slot rate;
calibration and rescans are not counted.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .channel import ChannelConfig, VisibilityDrift
from .params import PRESETS, SystemParams, get_preset
from .secmath import RatePrediction, predict_rates, secret_fraction
from .session import SessionConfig, Verdict, run_inproc, run_threaded

log = logging.getLogger(__name__)

MIN_COMPARE_SLOTS = 10**6
Z_LIMIT = 3.0

CSV_COLUMNS = (
    "loss_db", "sifted_rate", "qber", "visibility", "secret_rate", "predicted_secret_rate",
    "z_sifted", "z_qber", "blocks_ok", "blocks_rejected",
    "estimated_secret_rate", "distilled_bits", "predicted_sifted_rate", "predicted_qber",
    "visibility_sufficient", "exchange_seconds", "status",
)


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    preset: str = "apd"
    loss_points: tuple[float, ...] = (21.0,)
    slots: int = 10**8
    seed: int = 1
    out: Optional[Path] = None
    # SystemParams fields replaced on top of the preset (mu, visibility, ...)
    overrides: dict = field(default_factory=dict)
    # SessionConfig fields replaced on top of the defaults
    session: dict = field(default_factory=dict)
    mode: str = "inproc"  # inproc, queue or tcp
    vis_drop: Optional[tuple[float, float]] = None  # (time in s, visibility change)

    def __post_init__(self):
        if not self.loss_points:
            raise SpecError("no loss points")
        if self.slots < MIN_COMPARE_SLOTS:
            raise SpecError(f"slots must be at least {MIN_COMPARE_SLOTS} for a rate comparison")
        if self.preset != "custom" and self.preset.lower() not in PRESETS and self.preset.lower() not in (
                "apd_lab", "sspd_field"):
            raise SpecError(f"unknown preset {self.preset!r}")
        if self.mode not in ("inproc", "queue", "tcp"):
            raise SpecError(f"unknown mode {self.mode!r}")
        if not 0 <= self.seed < 2**64:
            raise SpecError("seed must fit in 64 bits")

    def params(self, loss_db: float) -> SystemParams:
        if self.preset == "custom":
            return SystemParams(loss_db=loss_db, **self.overrides)
        return get_preset(self.preset, loss_db=loss_db, **self.overrides)

    def channel(self, params: SystemParams) -> Optional[ChannelConfig]:
        if self.vis_drop is None:
            return None
        start, delta = self.vis_drop
        # the interferometer walks off the fringe minimum; a rescan finds it again
        drift = VisibilityDrift(kind="phase_step", start=start, delta=delta)
        return ChannelConfig.from_params(params, drifts=(drift,))

    def session_config(self, loss_db: float) -> SessionConfig:
        params = self.params(loss_db)
        return SessionConfig(params, seed=self.seed, exchange_slots=self.slots,
                             channel=self.channel(params), **self.session)


@dataclass
class PointResult:
    loss_db: float
    sifted_rate: float
    qber: float
    visibility: float
    secret_rate: float
    predicted_secret_rate: float
    z_sifted: float
    z_qber: float
    blocks_ok: int
    blocks_rejected: int
    estimated_secret_rate: float
    distilled_bits: int
    predicted_sifted_rate: float
    predicted_qber: float
    visibility_sufficient: bool
    exchange_seconds: float
    status: str
    # raw material for re-running the analytic comparison
    sifted_bits: int = 0
    sifted_errors: int = 0
    exchange_slots: int = 0
    window_offset: float = 0.0
    keys_match: bool = True
    alice_key: np.ndarray = field(default_factory=lambda: np.empty(0, np.uint8), repr=False)
    bob_key: np.ndarray = field(default_factory=lambda: np.empty(0, np.uint8), repr=False)
    events: list = field(default_factory=list, repr=False)
    blocks: list = field(default_factory=list, repr=False)
    windows: list = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def csv_row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in CSV_COLUMNS]


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    points: list[PointResult]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for p in self.points:
            w.writerow(p.csv_row())
        return buf.getvalue()

    def summary(self) -> dict:
        """Plateau spread and whether the secret rate falls monotonically past the plateau."""
        saturated = [predict_rates(self.spec.params(p.loss_db)).saturated for p in self.points]
        plateau = [p.secret_rate for p, s in zip(self.points, saturated) if s]
        beyond = [p.secret_rate for p, s in zip(self.points, saturated) if not s]
        spread = (max(plateau) - min(plateau)) / max(plateau) if plateau and max(plateau) > 0 else math.nan
        return {
            "plateau_points": sum(saturated),
            "plateau_spread": spread,
            "monotone_beyond_plateau": all(a >= b for a, b in zip(beyond, beyond[1:])),
        }


@dataclass
class AnalyticReport:
    rows: list[tuple[float, float, float]]  # (loss_db, z_sifted, z_qber)
    passed: bool

    def __str__(self) -> str:
        lines = [f"{loss:6.1f} dB  z_sifted {zs:+7.2f}  z_qber {zq:+7.2f}" for loss, zs, zq in self.rows]
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "nan" if math.isnan(value) else f"{float(value):.10g}"
    return str(value)


def _z_scores(n_sifted: int, n_errors: int, slots: int, pred: RatePrediction) -> tuple[float, float]:
    expected = pred.sifted_per_slot * slots
    z_sifted = (n_sifted - expected) / math.sqrt(expected) if expected > 0 else math.nan
    q = pred.qber
    var = n_sifted * q * (1.0 - q)
    if var > 0:
        z_qber = (n_errors - n_sifted * q) / math.sqrt(var)
    else:
        z_qber = 0.0 if n_errors == n_sifted * q else math.inf
    return z_sifted, z_qber


def _visibility(windows) -> tuple[float, bool]:
    """n_eff-weighted visibility over the windows the watchdog could judge."""
    judged = [w for w in windows if w.verdict in (Verdict.PASS, Verdict.FAIL)]
    if not judged:
        usable = [w for w in windows if w.n_eff > 0]
        if not usable:
            return math.nan, False
        weights = np.array([w.n_eff for w in usable])
        return float(np.average([w.visibility for w in usable], weights=weights)), False
    weights = np.array([w.n_eff for w in judged])
    return float(np.average([w.visibility for w in judged], weights=weights)), True


def run_point(spec: ExperimentSpec, loss_db: float) -> PointResult:
    cfg = spec.session_config(loss_db)
    params = cfg.params
    if spec.mode == "inproc":
        alice, bob = run_inproc(cfg)
    else:
        alice, bob = run_threaded(cfg, spec.mode)

    slots = alice.exchange_slots
    seconds = slots / params.slot_rate
    n_sifted = int(alice.sifted_bits.size)
    n_errors = int(np.count_nonzero(alice.sifted_bits != bob.sifted_bits)) if bob.sifted_bits.size == n_sifted else -1
    offset = bob.extra.get("window_delay", 0.0) - params.window_offset
    pred = predict_rates(replace(params, window_offset=offset))
    z_sifted, z_qber = _z_scores(n_sifted, n_errors, slots, pred) if slots else (math.nan, math.nan)

    vis, judged = _visibility(alice.windows)
    blocks_secure = bool(alice.blocks) and all(b.security_verified for b in alice.blocks)
    sufficient = judged and (blocks_secure or not alice.blocks)
    qber = n_errors / n_sifted if n_sifted else math.nan
    sifted_rate = n_sifted / seconds if seconds else math.nan
    vis_used = vis if sufficient else params.visibility
    estimated = math.nan
    if n_sifted and 0 <= qber <= 0.5:
        estimated = sifted_rate * secret_fraction(params.mu, params.transmission, vis_used, qber, params.f_ec)

    status = "ok" if alice.halt_reason is None and bob.halt_reason is None else \
        f"halted:{alice.halt_reason or bob.halt_reason}"
    match = np.array_equal(alice.key, bob.key)
    if not match:
        log.error("Alice and Bob keys differ at %.1f dB", loss_db)
    return PointResult(
        loss_db=loss_db,
        sifted_rate=sifted_rate,
        qber=qber,
        visibility=vis,
        secret_rate=alice.key.size / seconds if seconds else math.nan,
        predicted_secret_rate=pred.secret_rate_ec,
        z_sifted=z_sifted,
        z_qber=z_qber,
        blocks_ok=alice.blocks_ok,
        blocks_rejected=alice.blocks_rejected,
        estimated_secret_rate=estimated,
        distilled_bits=int(alice.key.size),
        predicted_sifted_rate=pred.sifted_rate,
        predicted_qber=pred.qber,
        visibility_sufficient=sufficient,
        exchange_seconds=seconds,
        status=status,
        sifted_bits=n_sifted,
        sifted_errors=n_errors,
        exchange_slots=slots,
        window_offset=offset,
        keys_match=match,
        alice_key=alice.key,
        bob_key=bob.key,
        events=alice.events,
        blocks=alice.blocks,
        windows=alice.windows,
    )


def run(spec: ExperimentSpec) -> ExperimentResult:
    """Every loss point of ``spec`` in order; writes outputs when ``spec.out`` is set."""
    result = ExperimentResult(spec, [run_point(spec, loss) for loss in spec.loss_points])
    if spec.out is not None:
        write_outputs(result, Path(spec.out))
    return result


def sweep(spec: ExperimentSpec) -> ExperimentResult:
    if len(spec.loss_points) < 2:
        raise SpecError("a sweep needs at least two loss points")
    return run(spec)


def compare_analytic(result: ExperimentResult,
                     params_for: Optional[Callable[[float], SystemParams]] = None,
                     dead_time: bool = True) -> AnalyticReport:
    """z-scores of the measured sifted count and error count against the predictor.

    ``params_for`` and ``dead_time`` change the model the prediction uses,
    for deliberate mismatch checks.
    """
    params_for = params_for or result.spec.params
    rows = []
    for p in result.points:
        if p.exchange_slots < MIN_COMPARE_SLOTS:
            raise SpecError(f"{p.loss_db} dB point has only {p.exchange_slots} exchange slots")
        params = replace(params_for(p.loss_db), window_offset=p.window_offset)
        pred = predict_rates(params, dead_time=dead_time)
        rows.append((p.loss_db, *_z_scores(p.sifted_bits, p.sifted_errors, p.exchange_slots, pred)))
    passed = all(abs(zs) <= Z_LIMIT and abs(zq) <= Z_LIMIT for _, zs, zq in rows)
    return AnalyticReport(rows, passed)


def _key_bytes(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def write_outputs(result: ExperimentResult, out: Path) -> None:
    """results.csv, one key file per endpoint and point, and manifest.json tying them together."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(result.to_csv())
    keys = out / "keys"
    keys.mkdir(exist_ok=True)
    entries = []
    for i, p in enumerate(result.points):
        files = {}
        for role, bits in (("alice", p.alice_key), ("bob", p.bob_key)):
            name = f"{role}_{i:02d}.key"
            data = _key_bytes(bits)
            (keys / name).write_bytes(data)
            files[role] = {"file": f"keys/{name}", "bits": int(bits.size),
                           "sha256": hashlib.sha256(data).hexdigest()}
        blocks = [{"block": b.block_id, "n": b.n, "leak_ec": b.leak_ec, "m": b.m, "verified": b.verified,
                   "qber": round(b.qber, 6), "visibility": round(float(b.visibility), 6),
                   "security_verified": b.security_verified, "time": round(b.time, 6)} for b in p.blocks]
        entries.append({"loss_db": p.loss_db, "distilled_bits": p.distilled_bits, "status": p.status,
                        "keys": files, "blocks": blocks})
    spec = result.spec
    manifest = {
        "preset": spec.preset,
        "loss_points": list(spec.loss_points),
        "slots": spec.slots,
        "seed": spec.seed,
        "mode": spec.mode,
        "overrides": spec.overrides,
        "vis_drop": list(spec.vis_drop) if spec.vis_drop else None,
        "columns": list(CSV_COLUMNS),
        "points": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_key(path: Path, bits: int) -> np.ndarray:
    data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    return np.unpackbits(data)[:bits]


def reconcile(out: Path) -> bool:
    """True when every CSV secret-bit count matches the key files the manifest lists."""
    out = Path(out)
    manifest = json.loads((out / "manifest.json").read_text())
    rows = list(csv.DictReader(io.StringIO((out / "results.csv").read_text())))
    if len(rows) != len(manifest["points"]):
        return False
    for row, entry in zip(rows, manifest["points"]):
        counts = set()
        for info in entry["keys"].values():
            data = (out / info["file"]).read_bytes()
            if hashlib.sha256(data).hexdigest() != info["sha256"] or len(data) != (info["bits"] + 7) // 8:
                return False
            counts.add(info["bits"])
        if counts != {int(row["distilled_bits"])}:
            return False
    return True


def loss_grid(start: float, stop: float, step: float) -> tuple[float, ...]:
    """Inclusive grid ``start, start + step, ...`` up to ``stop``."""
    if step <= 0:
        raise SpecError("sweep step must be positive")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    if n < 1:
        raise SpecError("empty sweep")
    return tuple(round(start + i * step, 9) for i in range(n))

