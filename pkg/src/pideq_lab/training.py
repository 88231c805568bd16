"""Adam optimizer, the training loop and multi-seed sweeps.

One epoch is: resample collocation points, build the loss graph, take one
full-batch Adam step, and periodically score the model against the cached
RK4 reference with the IAE metric. Runs are deterministic given the config:
the per-epoch collocation seed is derived arithmetically from (seed, epoch),
so curves and checkpoints are bit-identical across reruns.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .models import ConvergenceError, make_model, save_checkpoint
from .physics import IvpSpec, LossWeights, sample_collocation, total_loss
from .reference import Trajectory, evaluate_on_grid, iae, integrate
from .rootfind import SolverConfig

__all__ = [
    "AdamState",
    "TrainConfig",
    "LearningCurve",
    "TrainResult",
    "SweepReport",
    "TrainingAborted",
    "init_adam",
    "adam_step",
    "train",
    "moving_average",
    "seed_sweep",
    "write_aggregate_csv",
]

CURVE_HEADER = ["epoch", "j_b", "j_n", "jac_penalty", "total", "iae", "solver_iters"]


class TrainingAborted(RuntimeError):
    """Raised when a run hits solver divergence or a non-finite loss.

    Carries the partial learning curve so callers can persist diagnostics.
    """

    def __init__(self, message: str, curve: "LearningCurve"):
        super().__init__(message)
        self.curve = curve


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step_count: int
    lr: float
    beta1: float
    beta2: float
    epsilon: float


def init_adam(params: dict[str, np.ndarray], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        step_count=0,
        lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon,
    )


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> tuple[AdamState, dict[str, np.ndarray]]:
    """One bias-corrected Adam update; returns fresh state and parameters."""
    t = state.step_count + 1
    new_m, new_v, new_params = {}, {}, {}
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    # loose per-coordinate step bound, checked in debug mode
    bound = state.lr / ((1.0 - state.beta1) * math.sqrt(1.0 - state.beta2))
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for '{name}'")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter block '{name}'")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        assert float(np.max(np.abs(step), initial=0.0)) <= bound * (1 + 1e-12), "Adam step bound violated"
        new_m[name] = m
        new_v[name] = v
        new_params[name] = p - step
    return (
        AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.epsilon),
        new_params,
    )


# ---------------------------------------------------------------------------
# configuration and learning curves
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    model_kind: str = "pideq"            # "pideq" | "pinn"
    n_z: int = 80
    hidden: tuple[int, ...] = (20, 20, 20, 20)
    solver: SolverConfig = field(default_factory=SolverConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 50000
    collocation_n: int = 100
    seed: int = 0
    eval_every: int = 10
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    reference_steps: int = 20000
    eval_points: int = 1000

    def __post_init__(self):
        if self.model_kind not in ("pideq", "pinn"):
            raise ValueError(f"unknown model kind '{self.model_kind}'")
        if self.epochs < 1 or self.eval_every < 1:
            raise ValueError("epochs and eval_every must be >= 1")
        if self.collocation_n < 1:
            raise ValueError("collocation_n must be >= 1")
        if self.reference_steps % self.eval_points != 0:
            raise ValueError("reference_steps must be a multiple of eval_points")


@dataclass
class LearningCurve:
    epochs: list[int] = field(default_factory=list)
    j_b: list[float] = field(default_factory=list)
    j_n: list[float] = field(default_factory=list)
    jac_penalty: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    iae: list[float | None] = field(default_factory=list)
    solver_iters: list[float] = field(default_factory=list)
    g_evals: list[float] = field(default_factory=list)  # not persisted in the CSV

    def append(self, epoch, j_b, j_n, jac_penalty, total, iae_value, solver_iters, g_evals=0.0):
        self.epochs.append(int(epoch))
        self.j_b.append(float(j_b))
        self.j_n.append(float(j_n))
        self.jac_penalty.append(float(jac_penalty))
        self.total.append(float(total))
        self.iae.append(None if iae_value is None else float(iae_value))
        self.solver_iters.append(float(solver_iters))
        self.g_evals.append(float(g_evals))

    def __len__(self):
        return len(self.epochs)

    def eval_epochs(self) -> list[tuple[int, float]]:
        return [(e, v) for e, v in zip(self.epochs, self.iae) if v is not None]

    def final_iae(self) -> float:
        evals = self.eval_epochs()
        if not evals:
            raise ValueError("no IAE evaluations recorded")
        return evals[-1][1]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(CURVE_HEADER) + "\n")
            for i in range(len(self)):
                iae_field = "" if self.iae[i] is None else f"{self.iae[i]:.17g}"
                row = [
                    str(self.epochs[i]),
                    f"{self.j_b[i]:.17g}",
                    f"{self.j_n[i]:.17g}",
                    f"{self.jac_penalty[i]:.17g}",
                    f"{self.total[i]:.17g}",
                    iae_field,
                    f"{self.solver_iters[i]:.17g}",
                ]
                fh.write(",".join(row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "LearningCurve":
        curve = cls()
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                curve.append(
                    int(row["epoch"]), float(row["j_b"]), float(row["j_n"]),
                    float(row["jac_penalty"]), float(row["total"]),
                    float(row["iae"]) if row["iae"] else None,
                    float(row["solver_iters"]),
                )
        return curve


@dataclass
class TrainResult:
    model: object
    curve: LearningCurve
    best_iae: float
    checkpoint_best: str | None
    checkpoint_final: str | None


def _epoch_seed(seed: int, epoch: int) -> int:
    return (1_000_003 * (seed + 1) + epoch) % (2 ** 63 - 1)


def _reference_on_eval_grid(ref: Trajectory, eval_points: int, ivp: IvpSpec) -> Trajectory:
    # subsample the fine reference onto the evaluation grid, rebuilding the
    # times with the same expression evaluate_on_grid uses so the grids
    # compare bit-identical
    step = (len(ref) - 1) // eval_points
    times = ivp.t0 + (ivp.horizon - ivp.t0) / eval_points * np.arange(eval_points + 1)
    sub = ref.times[::step]
    if not np.allclose(times, sub, rtol=0.0, atol=1e-12):
        raise ValueError("reference grid does not align with the evaluation grid")
    return Trajectory(times=times, states=ref.states[::step])


def build_model(cfg: TrainConfig):
    if cfg.model_kind == "pideq":
        return make_model("pideq", n_z=cfg.n_z, solver=cfg.solver, seed=cfg.seed)
    return make_model("pinn", hidden=cfg.hidden, seed=cfg.seed)


def train(cfg: TrainConfig, ivp: IvpSpec, out_dir=None, reference_traj: Trajectory | None = None) -> TrainResult:
    """Run the epoch loop; optionally write curve + checkpoints under out_dir."""
    if reference_traj is None:
        reference_traj = integrate(ivp, cfg.reference_steps)
    if len(reference_traj) - 1 != cfg.reference_steps:
        raise ValueError("reference trajectory does not match reference_steps")
    ref_eval = _reference_on_eval_grid(reference_traj, cfg.eval_points, ivp)

    model = build_model(cfg)
    adam = init_adam(model.params_dict(), cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon)
    curve = LearningCurve()

    out = None
    if out_dir is not None:
        import pathlib

        out = pathlib.Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

    best_iae = math.inf
    best_path = str(out / "checkpoint_best.npz") if out else None
    final_path = str(out / "checkpoint_final.npz") if out else None

    def _flush_curve():
        if out is not None:
            curve.to_csv(out / "curve.csv")

    for epoch in range(1, cfg.epochs + 1):
        points = sample_collocation(ivp, cfg.collocation_n, _epoch_seed(cfg.seed, epoch))
        try:
            loss = total_loss(model, ivp, points, cfg.weights)
            grad_map = ad.gradient(loss.tape, loss.total_node, list(loss.param_nodes.values()))
            grads = {name: grad_map[node] for name, node in loss.param_nodes.items()}
            adam, new_params = adam_step(adam, model.params_dict(), grads)
        except (ConvergenceError, FloatingPointError) as exc:
            _flush_curve()
            raise TrainingAborted(f"epoch {epoch}: {exc}", curve) from exc
        model = model.with_params(new_params)

        iae_value = None
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            try:
                pred = evaluate_on_grid(model, ivp, cfg.eval_points)
            except (ConvergenceError, FloatingPointError) as exc:
                _flush_curve()
                raise TrainingAborted(f"epoch {epoch} (IAE evaluation): {exc}", curve) from exc
            iae_value = iae(pred, ref_eval, keep_errors=False).iae
            if iae_value < best_iae:
                best_iae = iae_value
                if best_path:
                    save_checkpoint(best_path, model)

        curve.append(epoch, loss.j_b, loss.j_n, loss.penalty, loss.total, iae_value,
                     loss.stats.get("solver_iterations_mean", 0.0),
                     loss.stats.get("g_evals_mean", 0.0))

    if final_path:
        save_checkpoint(final_path, model)
    _flush_curve()
    return TrainResult(model=model, curve=curve, best_iae=best_iae,
                       checkpoint_best=best_path, checkpoint_final=final_path)


def moving_average(series, window: int) -> np.ndarray:
    """Trailing moving average; warm-up entries average the available prefix."""
    if window < 1:
        raise ValueError("window must be >= 1")
    series = np.asarray(series, dtype=np.float64)
    if series.size == 0:
        return series
    csum = np.concatenate(([0.0], np.cumsum(series)))
    idx = np.arange(series.size)
    lo = np.maximum(0, idx - window + 1)
    return (csum[idx + 1] - csum[lo]) / (idx + 1 - lo)


# ---------------------------------------------------------------------------
# multi-seed sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepReport:
    results: list[TrainResult | None]      # None for failed runs
    seeds: list[int]
    failures: dict[int, str]               # seed -> error message
    median_index: int                      # index into results of the median-final-IAE run

    @property
    def median_result(self) -> TrainResult:
        return self.results[self.median_index]

    def final_iaes(self) -> list[float]:
        return [r.curve.final_iae() for r in self.results if r is not None]


def _run_seed(args):
    cfg, ivp, out_dir, ref = args
    try:
        return train(cfg, ivp, out_dir=out_dir, reference_traj=ref)
    except TrainingAborted as exc:
        return exc


def seed_sweep(cfg: TrainConfig, n_runs: int, ivp: IvpSpec, out_dir=None, jobs: int = 1,
               reference_traj: Trajectory | None = None) -> SweepReport:
    """Train n_runs models with seeds cfg.seed .. cfg.seed + n_runs - 1."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    if reference_traj is None:
        reference_traj = integrate(ivp, cfg.reference_steps)
    seeds = [cfg.seed + i for i in range(n_runs)]
    tasks = []
    for s in seeds:
        sub = None
        if out_dir is not None:
            import pathlib

            sub = pathlib.Path(out_dir) / f"seed-{s}"
        tasks.append((replace(cfg, seed=s), ivp, sub, reference_traj))

    if jobs > 1 and n_runs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_seed, tasks))
    else:
        outcomes = [_run_seed(t) for t in tasks]

    results: list[TrainResult | None] = []
    failures: dict[int, str] = {}
    for seed, outcome in zip(seeds, outcomes):
        if isinstance(outcome, TrainingAborted):
            failures[seed] = str(outcome)
            results.append(None)
        else:
            results.append(outcome)

    finals = [(i, r.curve.final_iae()) for i, r in enumerate(results) if r is not None]
    if not finals:
        raise TrainingAborted(
            "all runs failed: " + "; ".join(f"seed {s}: {m}" for s, m in failures.items()),
            LearningCurve(),
        )
    finals.sort(key=lambda item: item[1])
    median_index = finals[(len(finals) - 1) // 2][0]

    report = SweepReport(results=results, seeds=seeds, failures=failures, median_index=median_index)
    if out_dir is not None:
        import pathlib

        write_aggregate_csv(pathlib.Path(out_dir) / "aggregate.csv", report)
    return report


def write_aggregate_csv(path, report: SweepReport) -> None:
    """Per-epoch mean/min/max across the successful runs of a sweep."""
    curves = [r.curve for r in report.results if r is not None]
    if not curves:
        raise ValueError("no successful runs to aggregate")
    n_rows = min(len(c) for c in curves)
    metric_cols = ["j_b", "j_n", "jac_penalty", "total", "iae", "solver_iters"]
    header = ["epoch"]
    for col in metric_cols:
        header += [f"{col}_mean", f"{col}_min", f"{col}_max"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(n_rows):
            row = [str(curves[0].epochs[i])]
            for col in metric_cols:
                values = [getattr(c, col)[i] for c in curves]
                if any(v is None for v in values):
                    row += ["", "", ""]
                else:
                    row += [f"{np.mean(values):.17g}", f"{np.min(values):.17g}", f"{np.max(values):.17g}"]
            fh.write(",".join(row) + "\n")
