import json

import pytest
from click.testing import CliRunner

from ahcf.cli import main

FAST = "points_per_axis=8,t_end=1.0,record_every=2"


def invoke(tmp_path, *args, name="out"):
    out = tmp_path / name
    res = CliRunner().invoke(main, ["--out", str(out), "--quiet", *args], catch_exceptions=False)
    return res, out


def test_simulate_writes_artifacts_and_is_reproducible(tmp_path):
    a, out_a = invoke(tmp_path, "--overrides", FAST, "simulate", name="a")
    b, out_b = invoke(tmp_path, "--overrides", FAST, "simulate", name="b")
    assert a.exit_code == 0 and b.exit_code == 0
    assert (out_a / "trajectory.csv").read_bytes() == (out_b / "trajectory.csv").read_bytes()
    manifest = json.loads((out_a / "manifest.json").read_text())
    assert set(manifest["artifacts"]) >= {"report.json", "trajectory.csv", "trajectory.ckpt"}
    assert manifest["config"]["points_per_axis"] == 8


def test_seed_flag_wins_over_overrides(tmp_path):
    res, out = invoke(tmp_path, "--overrides", FAST + ",seed=3", "--seed", "7", "simulate")
    assert res.exit_code == 0
    assert json.loads((out / "manifest.json").read_text())["config"]["seed"] == 7


def test_spectrum_reports_gap(tmp_path):
    res, out = invoke(tmp_path, "spectrum", "--overrides", "points_per_axis=8")
    assert res.exit_code == 0
    rep = json.loads((out / "spectrum.json").read_text())
    assert rep["kernel_dimension"] == 3
    assert rep["gap_lambda"] == pytest.approx(1.0, abs=1e-8)


def test_verify_identities_passes(tmp_path):
    res, out = invoke(tmp_path, "verify-identities", "--overrides", "points_per_axis=8")
    assert res.exit_code == 0
    table = json.loads((out / "identities.json").read_text())
    assert table


def test_decay_fit_from_csv(tmp_path):
    invoke(tmp_path, "--overrides", "points_per_axis=8,t_end=3.0,record_every=1", "simulate", name="sim")
    res, out = invoke(tmp_path, "decay-fit", "--series", str(tmp_path / "sim" / "trajectory.csv"))
    assert res.exit_code == 0
    rep = json.loads((out / "decay.json").read_text())
    assert rep["fit_rate"] > 0.8


def test_usage_errors_exit_2(tmp_path):
    assert invoke(tmp_path, "no-such-verb")[0].exit_code == 2
    assert invoke(tmp_path, "--overrides", "bogus=1", "simulate")[0].exit_code == 2


def test_runtime_failure_exits_1_with_error_json(tmp_path):
    res, out = invoke(tmp_path, "--overrides", FAST + ",amplitude=0.5", "simulate")
    assert res.exit_code == 1
    assert "error" in json.loads((out / "error.json").read_text())
