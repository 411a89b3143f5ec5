import csv
import json
from pathlib import Path

import numpy as np
import pytest

from jumpfbsde import __version__
from jumpfbsde.cli import main
from jumpfbsde.lq import load_fixture

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(command, config, out, *extra):
    code = main([command, "--config", str(CONFIGS / f"{config}.yaml"), "--out", str(out), *extra])
    report = json.loads((Path(out) / "report.json").read_text())
    return code, report


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    # terminal rows leave the per-step columns blank
    return rows[0], np.array([[float(v) if v else np.nan for v in r] for r in rows[1:]])


def test_simulate_zero_model(tmp_path):
    code, rep = run("simulate", "zero", tmp_path)
    assert code == 0 and rep["status"] == "ok"
    header, data = read_csv(tmp_path / "trajectory.csv")
    cols = {h: data[:, j] for j, h in enumerate(header)}
    assert np.all(cols["x_1"] == 0.7)
    assert np.all(cols["y_1"] == 0.0)
    assert np.all(np.nan_to_num(cols["z_1_1"]) == 0.0)


def test_report_completeness(tmp_path):
    code, rep = run("simulate", "zero", tmp_path, "--seed", "9", "--paths", "64")
    assert code == 0
    for key in ("tool", "version", "command", "config", "seed", "overrides", "timings", "environment"):
        assert key in rep
    assert rep["version"] == __version__
    assert rep["seed"] == 9 and rep["config"]["numerics"]["seed"] == 9
    assert rep["overrides"] == {"seed": 9, "paths": 64, "out": str(tmp_path)}
    assert rep["config"]["numerics"]["P"] == 64


def test_negative_weight_exit_2(tmp_path):
    code, rep = run("simulate", "negative-weight", tmp_path)
    assert code == 2 and rep["status"] == "validation_error"
    assert any("weight" in e for e in rep["errors"])


def test_bad_override_exit_2(tmp_path):
    code, rep = run("simulate", "zero", tmp_path, "--paths", "1")
    assert code == 2


def test_unknown_key_exit_2(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model: {family: zero}\nnumerics: {NN: 4}\n")
    code = main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "NN" in json.loads((tmp_path / "o" / "report.json").read_text())["errors"][0]


def test_divergent_exit_3(tmp_path):
    code, rep = run("simulate", "divergent", tmp_path)
    assert code == 3 and rep["status"] == "diverged"
    assert rep["picard"]["nondecreasing_tail"]


@pytest.mark.parametrize("config", ["zero", "affine-example", "no-jump"])
def test_csv_identical_across_workers(tmp_path, config):
    outs = []
    for w in (1, 3):
        code, _ = run("simulate", config, tmp_path / f"w{w}", "--workers", str(w))
        assert code == 0
        outs.append((tmp_path / f"w{w}" / "trajectory.csv").read_bytes())
    assert outs[0] == outs[1]


def test_csv_round_trip_exact(tmp_path):
    from jumpfbsde.cli import build_control, build_problem, make_batch, picard_config
    from jumpfbsde.config import load_config
    from jumpfbsde.fbsde import solve_fbsde

    run("simulate", "affine-example", tmp_path)
    header, data = read_csv(tmp_path / "trajectory.csv")
    cfg = load_config(CONFIGS / "affine-example.yaml")
    spec = build_problem(cfg)
    batch = make_batch(cfg, spec)
    traj = solve_fbsde(spec, batch, build_control(cfg, spec, batch.grid, batch.P), picard_config(cfg))
    N = batch.grid.N
    for col, arr in (("x_1", traj.x[:, :, 0]), ("y_1", traj.y[:, :, 0])):
        got = data[:, header.index(col)].reshape(-1, N + 1)
        assert np.array_equal(got, arr[: got.shape[0]])


def test_optimize_pure_control(tmp_path):
    code, rep = run("optimize", "pure-control", tmp_path)
    assert code == 0
    header, data = read_csv(tmp_path / "control.csv")
    col = data[:, header.index("u_1")]
    assert np.allclose(col, 0.3, atol=1e-6, rtol=0)
    assert rep["results"]["optimizer"]["reason"] == "converged"


def test_verify_lq_oracle_passes(tmp_path):
    code, rep = run("verify", "lq-verify-oracle", tmp_path)
    assert code == 0, rep["results"]["failed"]
    assert all(c["passed"] for c in rep["results"]["checks"].values())


def test_verify_lq_zero_fails(tmp_path):
    code, rep = run("verify", "lq-verify-zero", tmp_path)
    assert code == 4
    assert {"stationarity", "max_condition"} <= set(rep["results"]["failed"])


def test_verify_no_jump_reduction(tmp_path):
    code, rep = run("verify", "no-jump", tmp_path)
    res = rep["results"]
    assert "M = 0" in res["reduction"]
    assert "jump" not in res["checks"]["ibp"]["fixtures"]
    assert set(res["checks"]["moments"]["skipped"]) >= {"state_gap_beta", "p_sigma"}


@pytest.mark.parametrize("name", ["pure-forward", "no-jump"])
def test_bench_reductions(tmp_path, name):
    code, rep = run("bench", name, tmp_path)
    assert code == 0 and rep["results"]["passed"]


def test_bench_oracle_source_is_fixture(tmp_path):
    code, rep = run("bench", "lq-full", tmp_path, "--steps", "16", "--paths", "2048")
    assert rep["results"]["details"]["oracle"]["J_star"] == load_fixture()["optimal_cost"]
    assert rep["results"]["details"]["oracle"]["source"] == "fixture"


def test_schema_command(capsys):
    assert main(["schema"]) == 0
    assert "numerics" in json.loads(capsys.readouterr().out)
