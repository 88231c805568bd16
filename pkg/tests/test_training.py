import numpy as np
import pytest

from pideq_lab.physics import LossWeights, vdp_ivp
from pideq_lab.reference import integrate
from pideq_lab.rootfind import SolverConfig
from pideq_lab import training
from pideq_lab.training import (
    CURVE_HEADER,
    LearningCurve,
    TrainConfig,
    TrainingAborted,
    adam_step,
    init_adam,
    moving_average,
    seed_sweep,
    train,
)


IVP = vdp_ivp()
REF = integrate(IVP, 2000)


def quick_cfg(**kw):
    base = dict(model_kind="pinn", hidden=(4, 4), weights=LossWeights(lam=0.1, kappa=0.0),
                epochs=5, collocation_n=10, seed=0, eval_every=10,
                reference_steps=2000, eval_points=1000)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_is_identity():
    params = {"w": np.array([[1.0], [2.0]])}
    state = init_adam(params)
    state2, new = adam_step(state, params, {"w": np.zeros((2, 1))})
    assert np.array_equal(new["w"], params["w"])
    assert np.all(state2.m["w"] == 0.0)
    assert np.all(state2.v["w"] == 0.0)
    assert state2.step_count == 1


def test_adam_first_step_unit_gradient():
    # bias-corrected m-hat / sqrt(v-hat) equals 1 on the first step
    params = {"w": np.array([[0.0]])}
    state = init_adam(params, lr=1e-3)
    _, new = adam_step(state, params, {"w": np.array([[1.0]])})
    assert new["w"][0, 0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_first_step_follows_sign_not_magnitude():
    params = {"w": np.array([[0.0]])}
    state = init_adam(params, lr=1e-3)
    _, new = adam_step(state, params, {"w": np.array([[-4.0]])})
    assert new["w"][0, 0] == pytest.approx(1e-3, rel=1e-6)


def test_adam_rejects_nonfinite_gradient():
    params = {"weights": np.zeros((2, 1))}
    state = init_adam(params)
    with pytest.raises(FloatingPointError, match="weights"):
        adam_step(state, params, {"weights": np.array([[np.nan], [0.0]])})


def test_adam_rejects_shape_mismatch():
    params = {"w": np.zeros((2, 1))}
    with pytest.raises(ValueError, match="shape"):
        adam_step(init_adam(params), params, {"w": np.zeros((3, 1))})


def test_adam_step_bound_holds_over_random_sequence():
    rng = np.random.default_rng(0)
    params = {"w": rng.normal(size=(4, 4))}
    state = init_adam(params, lr=1e-3)
    bound = 1e-3 / ((1 - 0.9) * np.sqrt(1 - 0.999))
    for _ in range(50):
        g = {"w": rng.normal(size=(4, 4)) * 10.0 ** rng.integers(-3, 3)}
        state, new = adam_step(state, params, g)
        assert np.max(np.abs(new["w"] - params["w"])) <= bound
        params = new


# ---------------------------------------------------------------------------
# moving average
# ---------------------------------------------------------------------------

def test_moving_average_window_one_is_identity():
    s = np.array([3.0, -1.0, 2.0])
    assert np.array_equal(moving_average(s, 1), s)


def test_moving_average_constant_series():
    assert np.allclose(moving_average(np.full(10, 4.2), 3), 4.2)


def test_moving_average_truncated_warmup():
    out = moving_average([1.0, 2.0, 3.0], 2)
    assert np.allclose(out, [1.0, 1.5, 2.5])


def test_moving_average_empty_series():
    assert moving_average([], 5).size == 0


def test_moving_average_preserves_monotonicity():
    s = np.cumsum(np.abs(np.random.default_rng(1).normal(size=50)))
    out = moving_average(s, 7)
    assert np.all(np.diff(out) >= -1e-12)


def test_moving_average_rejects_bad_window():
    with pytest.raises(ValueError):
        moving_average([1.0], 0)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_train_single_epoch_contract(tmp_path):
    cfg = quick_cfg(epochs=1, eval_every=10)
    res = train(cfg, IVP, out_dir=tmp_path, reference_traj=REF)
    # one record, with an IAE evaluation forced on the final epoch
    assert len(res.curve) == 1
    assert res.curve.iae[0] is not None
    assert (tmp_path / "curve.csv").exists()
    assert (tmp_path / "checkpoint_best.npz").exists()
    assert (tmp_path / "checkpoint_final.npz").exists()


def test_train_eval_schedule():
    cfg = quick_cfg(epochs=25, eval_every=10)
    res = train(cfg, IVP, reference_traj=REF)
    evaluated = [e for e, v in zip(res.curve.epochs, res.curve.iae) if v is not None]
    assert evaluated == [10, 20, 25]


def test_train_boundary_fit_improves():
    # pure boundary fitting is a trivial regression: J_b must drop
    cfg = quick_cfg(weights=LossWeights(lam=0.0, kappa=0.0), epochs=200, eval_every=200)
    res = train(cfg, IVP, reference_traj=REF)
    assert res.curve.j_b[-1] < res.curve.j_b[0]


def test_train_deterministic_curves_and_checkpoints(tmp_path):
    cfg = quick_cfg(epochs=30, eval_every=10, seed=3)
    a = tmp_path / "a"
    b = tmp_path / "b"
    train(cfg, IVP, out_dir=a, reference_traj=REF)
    train(cfg, IVP, out_dir=b, reference_traj=REF)
    assert (a / "curve.csv").read_bytes() == (b / "curve.csv").read_bytes()
    assert (a / "checkpoint_final.npz").read_bytes() == (b / "checkpoint_final.npz").read_bytes()


def test_train_curve_is_finite():
    cfg = quick_cfg(epochs=40, eval_every=20)
    res = train(cfg, IVP, reference_traj=REF)
    for column in (res.curve.j_b, res.curve.j_n, res.curve.total, res.curve.solver_iters):
        assert np.all(np.isfinite(column))
    assert all(v is None or np.isfinite(v) for v in res.curve.iae)
    assert res.curve.epochs == sorted(res.curve.epochs)


def test_train_aborts_on_solver_failure(tmp_path):
    # a solver starved of iterations cannot converge once parameters move
    cfg = TrainConfig(model_kind="pideq", n_z=3,
                      solver=SolverConfig(method="simple", tolerance=1e-12, max_iterations=2),
                      weights=LossWeights(lam=0.1, kappa=1.0),
                      epochs=50, collocation_n=5, seed=0, eval_every=100,
                      reference_steps=2000, eval_points=1000)
    with pytest.raises(TrainingAborted) as err:
        train(cfg, IVP, out_dir=tmp_path, reference_traj=REF)
    assert (tmp_path / "curve.csv").exists()  # partial curve retained
    assert len(err.value.curve) < 50


def test_train_config_validation():
    with pytest.raises(ValueError):
        quick_cfg(epochs=0)
    with pytest.raises(ValueError):
        quick_cfg(eval_every=0)
    with pytest.raises(ValueError):
        quick_cfg(model_kind="mlp")
    with pytest.raises(ValueError):
        quick_cfg(reference_steps=1500, eval_points=1000)


# ---------------------------------------------------------------------------
# learning curve persistence
# ---------------------------------------------------------------------------

def test_curve_csv_header_and_roundtrip(tmp_path):
    cfg = quick_cfg(epochs=12, eval_every=5)
    res = train(cfg, IVP, reference_traj=REF)
    path = tmp_path / "curve.csv"
    res.curve.to_csv(path)
    first = path.read_text(encoding="utf-8").splitlines()[0]
    assert first == ",".join(CURVE_HEADER) == "epoch,j_b,j_n,jac_penalty,total,iae,solver_iters"
    back = LearningCurve.from_csv(path)
    assert back.epochs == res.curve.epochs
    assert back.iae == res.curve.iae
    assert np.allclose(back.total, res.curve.total)
    assert back.final_iae() == res.curve.final_iae()


# ---------------------------------------------------------------------------
# seed sweeps
# ---------------------------------------------------------------------------

def test_seed_sweep_single_run_envelope(tmp_path):
    cfg = quick_cfg(epochs=15, eval_every=5)
    report = seed_sweep(cfg, 1, IVP, out_dir=tmp_path, reference_traj=REF)
    assert report.median_index == 0
    agg = (tmp_path / "aggregate.csv").read_text(encoding="utf-8").splitlines()
    header = agg[0].split(",")
    assert header[0] == "epoch"
    assert {"j_b_mean", "j_b_min", "j_b_max", "iae_mean", "iae_min", "iae_max"} <= set(header)
    for line in agg[1:3]:
        fields = dict(zip(header, line.split(",")))
        assert fields["total_mean"] == fields["total_min"] == fields["total_max"]


def test_seed_sweep_mean_within_envelope(tmp_path):
    cfg = quick_cfg(epochs=20, eval_every=10)
    report = seed_sweep(cfg, 3, IVP, out_dir=tmp_path, reference_traj=REF)
    curves = [r.curve for r in report.results]
    totals = np.array([c.total for c in curves])
    mean = totals.mean(axis=0)
    assert np.all(mean >= totals.min(axis=0) - 1e-15)
    assert np.all(mean <= totals.max(axis=0) + 1e-15)
    assert len({tuple(c.total) for c in curves}) == 3  # seeds actually differ


def test_seed_sweep_median_selection():
    cfg = quick_cfg(epochs=10, eval_every=5)
    report = seed_sweep(cfg, 3, IVP, reference_traj=REF)
    finals = [r.curve.final_iae() for r in report.results]
    assert report.median_result.curve.final_iae() == sorted(finals)[1]


def test_seed_sweep_records_failures(monkeypatch, tmp_path):
    real_train = training.train

    def flaky(cfg, ivp, out_dir=None, reference_traj=None):
        if cfg.seed == 1:
            raise TrainingAborted("synthetic failure", LearningCurve())
        return real_train(cfg, ivp, out_dir=out_dir, reference_traj=reference_traj)

    monkeypatch.setattr(training, "train", flaky)
    cfg = quick_cfg(epochs=8, eval_every=4, seed=0)
    report = seed_sweep(cfg, 3, IVP, out_dir=tmp_path, reference_traj=REF)
    assert report.failures == {1: "synthetic failure"}
    assert report.results[1] is None
    assert len(report.final_iaes()) == 2


def test_seed_sweep_all_failed_raises(monkeypatch):
    def always_fail(cfg, ivp, out_dir=None, reference_traj=None):
        raise TrainingAborted("boom", LearningCurve())

    monkeypatch.setattr(training, "train", always_fail)
    with pytest.raises(TrainingAborted, match="all runs failed"):
        seed_sweep(quick_cfg(), 2, IVP, reference_traj=REF)


def test_seed_sweep_parallel_matches_serial(tmp_path):
    cfg = quick_cfg(epochs=10, eval_every=5)
    serial = seed_sweep(cfg, 2, IVP, reference_traj=REF)
    parallel = seed_sweep(cfg, 2, IVP, jobs=2, reference_traj=REF)
    for r_s, r_p in zip(serial.results, parallel.results):
        assert r_s.curve.total == r_p.curve.total
        assert r_s.curve.iae == r_p.curve.iae
