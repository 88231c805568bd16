import json
import os

import numpy as np
import pytest
import yaml

from pideq_lab.cli import main
from pideq_lab.config import (
    ConfigError,
    DEFAULTS,
    apply_overrides,
    config_hash,
    load_config,
    to_train_config,
)


QUICK = [
    "--override", "model.kind=pinn",
    "--override", "hidden=[4,4]",
    "--override", "epochs=40",
    "--override", "n_runs=1",
    "--override", "eval_every=20",
    "--override", "collocation_n=10",
    "--override", "reference.n_steps=2000",
]


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def test_defaults_follow_training_protocol():
    cfg = load_config(None)
    tc = to_train_config(cfg)
    assert tc.model_kind == "pideq"
    assert tc.n_z == 80
    assert tc.lr == 1e-3
    assert tc.weights.lam == 0.1
    assert tc.weights.kappa == 1.0
    assert tc.solver.method == "anderson"
    assert tc.solver.tolerance == 1e-4
    assert tc.epochs == 50000
    assert cfg["train"]["n_runs"] == 5
    assert cfg["sweep"]["states"] == [80, 40, 20, 10, 5, 2]
    assert cfg["sweep"]["kappa"] == [0.0, 0.1, 1.0, 10.0]
    assert cfg["sweep"]["solver"] == ["simple", "anderson", "broyden"]


def test_unknown_config_key_rejected(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  epochz: 10\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="epochz"):
        load_config(bad)


def test_override_bare_and_dotted_keys():
    cfg = apply_overrides(load_config(None), ["epochs=123", "model.n_z=7", "lambda=0.5"])
    assert cfg["train"]["epochs"] == 123
    assert cfg["model"]["n_z"] == 7
    assert cfg["loss"]["lambda"] == 0.5


def test_override_ambiguous_or_unknown_keys():
    with pytest.raises(ConfigError, match="ambiguous"):
        apply_overrides(load_config(None), ["kappa=1"])  # loss.kappa vs sweep.kappa
    with pytest.raises(ConfigError, match="unknown override"):
        apply_overrides(load_config(None), ["learning_rate=1"])
    with pytest.raises(ConfigError, match="KEY=VALUE"):
        apply_overrides(load_config(None), ["epochs"])


def test_config_hash_is_stable_and_sensitive():
    cfg = load_config(None)
    assert config_hash(cfg) == config_hash(load_config(None))
    assert config_hash(cfg) != config_hash(apply_overrides(cfg, ["epochs=1"]))


# ---------------------------------------------------------------------------
# reference command
# ---------------------------------------------------------------------------

def test_cmd_reference_outputs(tmp_path):
    out = tmp_path / "ref"
    assert main(["reference", "--out", str(out)]) == 0
    lines = (out / "reference.csv").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 20002  # header + n_steps + 1 rows
    header = lines[0].split(",")
    assert header == ["t", "y1", "y2"]
    first = [float(v) for v in lines[1].split(",")]
    assert first == [0.0, 0.0, 0.1]
    svg = (out / "state_space.svg").read_bytes()
    assert len(svg) > 0
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["status"] == "completed"
    assert "reference.csv" in manifest["artifacts"]
    assert (out / "config.yaml").exists()


# ---------------------------------------------------------------------------
# train command
# ---------------------------------------------------------------------------

def test_cmd_train_quick_run(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), *QUICK]) == 0
    curve = (out / "seed-0" / "curve.csv").read_text(encoding="utf-8").splitlines()
    assert len(curve) == 41  # header + epochs rows
    assert (out / "seed-0" / "checkpoint_final.npz").exists()
    assert (out / "loss.svg").exists() and (out / "iae.svg").exists()
    resolved = yaml.safe_load((out / "config.yaml").read_text(encoding="utf-8"))
    assert resolved["train"]["epochs"] == 40
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["status"] == "completed"
    assert manifest["run_id"].startswith("pinn-0-")


def test_cmd_train_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--out", str(a), *QUICK]) == 0
    assert main(["train", "--out", str(b), *QUICK]) == 0
    assert (a / "seed-0/curve.csv").read_bytes() == (b / "seed-0/curve.csv").read_bytes()


def test_cmd_train_refuses_nonempty_out(tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    (out / "stale.txt").write_text("old", encoding="utf-8")
    assert main(["train", "--out", str(out), *QUICK]) == 1
    assert main(["train", "--out", str(out), "--force", *QUICK]) == 0


def test_cmd_train_env_seed_override(tmp_path, monkeypatch):
    monkeypatch.setenv("PIDEQ_LAB_SEED", "42")
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), *QUICK]) == 0
    resolved = yaml.safe_load((out / "config.yaml").read_text(encoding="utf-8"))
    assert resolved["train"]["seed"] == 42
    assert (out / "seed-42").is_dir()


def test_cmd_train_numerical_failure_exit_code(tmp_path):
    out = tmp_path / "run"
    code = main([
        "train", "--out", str(out),
        "--override", "model.n_z=3",
        "--override", "solver.method=simple",
        "--override", "solver.max_iterations=2",
        "--override", "solver.tolerance=1e-12",
        "--override", "epochs=50",
        "--override", "n_runs=1",
        "--override", "collocation_n=5",
        "--override", "reference.n_steps=2000",
    ])
    assert code == 2
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["status"] == "failed"


def test_cli_usage_error_exit_code(tmp_path):
    assert main(["train"]) == 1                      # missing --out
    assert main(["sweep", "bogus", "--out", str(tmp_path / "x")]) == 1
    assert main(["train", "--out", str(tmp_path / "y"), "--override", "nope=1"]) == 1


# ---------------------------------------------------------------------------
# sweep and report commands
# ---------------------------------------------------------------------------

def test_cmd_sweep_solver_quick(tmp_path):
    out = tmp_path / "sweep"
    code = main([
        "sweep", "solver", "--out", str(out),
        "--override", "model.n_z=2",
        "--override", "epochs=12",
        "--override", "n_runs=1",
        "--override", "eval_every=6",
        "--override", "collocation_n=8",
        "--override", "reference.n_steps=2000",
        "--override", "sweep.solver=[simple,anderson]",
    ])
    assert code == 0
    lines = (out / "summary.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0].split(",")[:3] == ["point", "n_runs", "n_ok"]
    assert len(lines) == 3
    assert {"solver-simple", "solver-anderson"} == {l.split(",")[0] for l in lines[1:]}
    assert (out / "overlay_iae.svg").exists()
    assert (out / "solver-simple" / "seed-0" / "curve.csv").exists()
    # per-point resolved configs record the solver that actually ran
    point_cfg = yaml.safe_load((out / "solver-simple" / "config.yaml").read_text(encoding="utf-8"))
    assert point_cfg["solver"]["method"] == "simple"


def test_cmd_report(tmp_path):
    run_a = tmp_path / "pinn-run"
    run_b = tmp_path / "pinn-run-b"
    assert main(["train", "--out", str(run_a), *QUICK]) == 0
    assert main(["train", "--out", str(run_b), *QUICK, "--override", "seed=1"]) == 0
    out = tmp_path / "report"
    assert main(["report", str(run_a), str(run_b), "--out", str(out)]) == 0
    lines = (out / "summary.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0].split(",")[0] == "group"
    assert len(lines) == 3
    assert (out / "overlay_iae.svg").exists()
    assert (out / "prediction.svg").stat().st_size > 0


def test_cmd_report_skips_missing_dirs(tmp_path, capsys):
    run_a = tmp_path / "ok"
    assert main(["train", "--out", str(run_a), *QUICK]) == 0
    out = tmp_path / "report"
    assert main(["report", str(run_a), str(tmp_path / "missing"), "--out", str(out)]) == 0
    assert "skipped" in capsys.readouterr().err


def test_cmd_report_no_usable_runs(tmp_path):
    assert main(["report", str(tmp_path / "nothing"), "--out", str(tmp_path / "rep")]) == 1
