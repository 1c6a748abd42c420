import csv
import io
import json
import math

import numpy as np
import pytest

from cowqkd import cli
from cowqkd.harness import (CSV_COLUMNS, ExperimentSpec, SpecError, compare_analytic, loss_grid, read_key,
                            reconcile, run, sweep, write_outputs)


@pytest.fixture(scope="module")
def apd6():
    return run(ExperimentSpec("apd", (6.0,), 2 * 10**8, seed=3))


def test_spec_validation():
    with pytest.raises(SpecError):
        ExperimentSpec("apd", (6.0,), 10**5)
    with pytest.raises(SpecError):
        ExperimentSpec("nonsense", (6.0,))
    with pytest.raises(SpecError):
        ExperimentSpec("apd", ())
    with pytest.raises(SpecError):
        ExperimentSpec("apd", (6.0,), mode="carrier-pigeon")
    with pytest.raises(SpecError):
        sweep(ExperimentSpec("apd", (6.0,)))


def test_loss_grid():
    assert loss_grid(6, 21, 3) == (6.0, 9.0, 12.0, 15.0, 18.0, 21.0)
    assert loss_grid(0, 0.3, 0.1) == (0.0, 0.1, 0.2, 0.3)
    with pytest.raises(SpecError):
        loss_grid(0, 1, 0)


def test_point_produces_matching_keys(apd6):
    (p,) = apd6.points
    assert p.ok and p.keys_match
    assert p.distilled_bits > 0
    assert p.secret_rate == pytest.approx(p.distilled_bits / p.exchange_seconds)
    assert p.blocks_ok >= 1


def test_point_agrees_with_prediction(apd6):
    report = compare_analytic(apd6)
    assert report.passed, str(report)


def test_ignoring_dead_time_is_caught_at_short_distance(apd6):
    # near the detector ceiling, a model without dead time overpredicts badly
    report = compare_analytic(apd6, dead_time=False)
    assert not report.passed
    assert report.rows[0][1] < -10


def test_dead_time_mismatch_shrinks_with_distance(apd6):
    far = run(ExperimentSpec("apd", (31.0,), 2 * 10**8, seed=3))
    assert compare_analytic(far).passed

    def shortfall(res):
        # observed over predicted sifted counts when the model ignores dead time
        p = res.points[0]
        zs = compare_analytic(res, dead_time=False).rows[0][1]
        # z = (n - E) / sqrt(E), solved for E
        root = (-zs + math.sqrt(zs * zs + 4 * p.sifted_bits)) / 2
        return p.sifted_bits / root**2

    near, far_ratio = shortfall(apd6), shortfall(far)
    assert near < 0.05
    assert 0.5 < far_ratio < 0.9


def test_csv_layout(apd6):
    rows = list(csv.reader(io.StringIO(apd6.to_csv())))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 2
    row = dict(zip(rows[0], rows[1]))
    assert float(row["loss_db"]) == 6.0 and row["status"] == "ok"


def test_identical_seeds_give_identical_csv(apd6):
    again = run(ExperimentSpec("apd", (6.0,), 2 * 10**8, seed=3))
    assert again.to_csv() == apd6.to_csv()
    assert np.array_equal(again.points[0].alice_key, apd6.points[0].alice_key)


def test_outputs_reconcile(apd6, tmp_path):
    write_outputs(apd6, tmp_path)
    assert reconcile(tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    (entry,) = manifest["points"]
    assert entry["keys"]["alice"]["sha256"] == entry["keys"]["bob"]["sha256"]
    assert sum(b["m"] for b in entry["blocks"] if b["verified"]) == entry["distilled_bits"]
    key = read_key(tmp_path / entry["keys"]["alice"]["file"], entry["keys"]["alice"]["bits"])
    assert np.array_equal(key, apd6.points[0].alice_key)


def test_reconcile_spots_tampered_key(apd6, tmp_path):
    write_outputs(apd6, tmp_path)
    path = tmp_path / "keys" / "bob_00.key"
    data = bytearray(path.read_bytes())
    data[0] ^= 1
    path.write_bytes(bytes(data))
    assert not reconcile(tmp_path)


def test_summary_on_sweep():
    res = sweep(ExperimentSpec("apd", (3.0, 6.0), 2 * 10**8, seed=3))
    summary = res.summary()
    assert summary["plateau_points"] == 2
    assert 0 <= summary["plateau_spread"] < 0.5


def test_dark_link_halts_cleanly():
    # no photons reach Bob, so alignment cannot lock and the session gives up
    res = run(ExperimentSpec("apd", (200.0,), 10**6, seed=1))
    (p,) = res.points
    assert p.status.startswith("halted:")
    assert p.distilled_bits == 0 and p.keys_match
    assert math.isnan(p.qber) or p.sifted_bits == 0


def test_cli_writes_outputs(tmp_path, capsys):
    code = cli.main(["--preset", "apd", "--loss-db", "6", "--slots", "2e8", "--seed", "3", "--out", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr()
    assert out.out.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert "PASS" in out.err
    assert reconcile(tmp_path)


def test_cli_rejects_bad_arguments(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--slots", "1.5"])
    assert cli.main(["--slots", "1000"]) == 2
