"""Command-line entry point: reference generation, training runs, hyperparameter
sweeps and comparison reports.

Commands refuse to write into a non-empty directory unless --force is given,
and every run directory carries its resolved config plus a manifest, so any
artifact can be reproduced from its own directory.

Exit codes: 0 success, 1 usage/config error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    apply_env_seed,
    apply_overrides,
    finalize_manifest,
    load_config,
    resolved_yaml,
    run_id,
    start_manifest,
    to_ivp,
    to_train_config,
)
from .models import ConvergenceError, load_checkpoint
from .reference import Trajectory, evaluate_on_grid, integrate
from .training import LearningCurve, TrainingAborted, seed_sweep

SWEEP_KINDS = ("states", "kappa", "solver")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors map to exit code 1, not argparse's 2
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="pideq-lab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"pideq-lab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, overrides=True):
        p.add_argument("--config", type=Path, default=None, help="YAML config (defaults when omitted)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
        if overrides:
            p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                           help="config override, repeatable (e.g. epochs=100, model.n_z=5)")
            p.add_argument("--jobs", type=int, default=1, help="concurrent runs within a sweep")

    common(sub.add_parser("reference", help="write the RK4 reference trajectory and state-space plot"),
           overrides=False)
    common(sub.add_parser("train", help="train one configuration (n_runs seeds)"))
    sweep_p = sub.add_parser("sweep", help="run a hyperparameter sweep")
    sweep_p.add_argument("kind", choices=SWEEP_KINDS)
    common(sweep_p)
    report_p = sub.add_parser("report", help="compare completed run directories")
    report_p.add_argument("runs", nargs="+", type=Path, help="run directories from `train` or sweep points")
    report_p.add_argument("--out", type=Path, required=True)
    report_p.add_argument("--force", action="store_true")
    return parser


def _prepare_out(out: Path, force: bool) -> Path:
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to proceed)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_config(args) -> dict:
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, getattr(args, "override", []))
    return apply_env_seed(cfg)


def _artifacts(out: Path) -> list[str]:
    return [str(p.relative_to(out)) for p in sorted(out.rglob("*")) if p.is_file()]


def _write_config(cfg: dict, out: Path) -> None:
    (out / "config.yaml").write_text(resolved_yaml(cfg), encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_reference(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args.out, args.force)
    _write_config(cfg, out)
    manifest = start_manifest(run_id(cfg, "reference"), cfg, __version__, out / "manifest.json")
    try:
        ivp = to_ivp(cfg)
        traj = integrate(ivp, int(cfg["reference"]["n_steps"]))
    except (FloatingPointError, ValueError) as exc:
        finalize_manifest(manifest, out / "manifest.json", "failed", _artifacts(out), str(exc))
        raise
    traj.to_csv(out / "reference.csv")
    from . import plots

    plots.save_state_space(traj, out / "state_space.svg", title="Van der Pol reference (RK4)")
    finalize_manifest(manifest, out / "manifest.json", "completed", _artifacts(out))
    print(f"reference: {len(traj)} points -> {out}")
    return 0


def _run_group(cfg: dict, out: Path, jobs: int, reference_traj=None):
    """Train cfg's model for its configured number of seeds into out/."""
    train_cfg = to_train_config(cfg)
    ivp = to_ivp(cfg)
    n_runs = int(cfg["train"]["n_runs"])
    return seed_sweep(train_cfg, n_runs, ivp, out_dir=out, jobs=jobs, reference_traj=reference_traj)


def _group_plots(report, out: Path) -> None:
    from . import plots

    curves, labels = [], []
    for seed, result in zip(report.seeds, report.results):
        if result is not None:
            curves.append(result.curve)
            labels.append(f"seed {seed}")
    if curves:
        plots.save_loss_plot(curves, labels, out / "loss.svg")
        plots.save_iae_plot(curves, labels, out / "iae.svg")
        plots.save_iae_overlay({"runs": curves}, out / "iae_envelope.svg")


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args.out, args.force)
    _write_config(cfg, out)
    manifest = start_manifest(run_id(cfg), cfg, __version__, out / "manifest.json")
    try:
        report = _run_group(cfg, out, args.jobs)
    except TrainingAborted as exc:
        finalize_manifest(manifest, out / "manifest.json", "failed", _artifacts(out), str(exc))
        raise
    _group_plots(report, out)
    error = "; ".join(f"seed {s}: {msg}" for s, msg in report.failures.items())
    finalize_manifest(manifest, out / "manifest.json", "completed", _artifacts(out), error)
    finals = report.final_iaes()
    median = report.median_result.curve.final_iae()
    print(f"train: {len(finals)}/{len(report.seeds)} runs ok; "
          f"final IAE median {median:.4g} (min {min(finals):.4g}, max {max(finals):.4g}) -> {out}")
    if report.failures:
        print(f"failed runs: {error}", file=sys.stderr)
    return 0


def _sweep_points(cfg: dict, kind: str):
    """Per-point configs for a sweep; yields (label, point config)."""
    if kind == "states":
        for n_z in cfg["sweep"]["states"]:
            point = copy.deepcopy(cfg)
            point["model"]["kind"] = "pideq"
            point["model"]["n_z"] = int(n_z)
            yield f"states-{n_z}", point
    elif kind == "kappa":
        for kappa in cfg["sweep"]["kappa"]:
            point = copy.deepcopy(cfg)
            point["model"]["kind"] = "pideq"
            point["loss"]["kappa"] = float(kappa)
            if float(kappa) == 0.0:
                point["train"]["n_runs"] = int(cfg["sweep"]["kappa_zero_runs"])
            label = f"kappa-{kappa:g}" if isinstance(kappa, float) else f"kappa-{kappa}"
            yield label, point
    elif kind == "solver":
        for method in cfg["sweep"]["solver"]:
            point = copy.deepcopy(cfg)
            point["model"]["kind"] = "pideq"
            point["solver"]["method"] = str(method)
            yield f"solver-{method}", point
    else:
        raise ConfigError(f"unknown sweep kind '{kind}'")


def _epochs_to_threshold(curve: LearningCurve, threshold: float):
    for epoch, value in curve.eval_epochs():
        if value <= threshold:
            return epoch
    return None


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args.out, args.force)
    _write_config(cfg, out)
    manifest = start_manifest(run_id(cfg, f"sweep-{args.kind}"), cfg, __version__, out / "manifest.json")
    threshold = float(cfg["sweep"]["iae_threshold"])

    from . import plots

    ivp = to_ivp(cfg)
    reference_traj = integrate(ivp, int(cfg["reference"]["n_steps"]))

    rows = []
    overlay: dict[str, list[LearningCurve]] = {}
    failures = []
    for label, point_cfg in _sweep_points(cfg, args.kind):
        point_dir = out / label
        point_dir.mkdir(parents=True, exist_ok=True)
        _write_config(point_cfg, point_dir)
        try:
            report = _run_group(point_cfg, point_dir, args.jobs, reference_traj)
        except TrainingAborted as exc:
            failures.append(f"{label}: {exc}")
            print(f"sweep point {label} failed: {exc}", file=sys.stderr)
            rows.append({"point": label, "n_runs": point_cfg["train"]["n_runs"], "n_ok": 0})
            continue
        _group_plots(report, point_dir)
        finals = report.final_iaes()
        curves = [r.curve for r in report.results if r is not None]
        overlay[label] = curves
        median_curve = report.median_result.curve
        to_thresh = _epochs_to_threshold(median_curve, threshold)
        rows.append({
            "point": label,
            "n_runs": len(report.seeds),
            "n_ok": len(finals),
            "final_iae_median": median_curve.final_iae(),
            "final_iae_mean": float(np.mean(finals)),
            "final_iae_min": float(np.min(finals)),
            "final_iae_max": float(np.max(finals)),
            "solver_iters_mean": float(np.mean([np.mean(c.solver_iters) for c in curves])),
            "g_evals_mean": float(np.mean([np.mean(c.g_evals) for c in curves])),
            "epochs_to_threshold": to_thresh if to_thresh is not None else "",
        })

    fieldnames = ["point", "n_runs", "n_ok", "final_iae_median", "final_iae_mean",
                  "final_iae_min", "final_iae_max", "solver_iters_mean", "g_evals_mean",
                  "epochs_to_threshold"]
    with open(out / "summary.csv", "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, restval="", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    if overlay:
        plots.save_iae_overlay(overlay, out / "overlay_iae.svg", title=f"{args.kind} sweep")

    status = "completed" if overlay else "failed"
    finalize_manifest(manifest, out / "manifest.json", status, _artifacts(out), "; ".join(failures))
    print(f"sweep {args.kind}: {len(overlay)}/{len(rows)} points ok -> {out}")
    return 0 if overlay else 2


def _load_group(run_dir: Path):
    """Curves + median checkpoint + config from a train run directory."""
    import yaml

    config_path = run_dir / "config.yaml"
    cfg = yaml.safe_load(config_path.read_text(encoding="utf-8")) if config_path.exists() else None
    seed_dirs = sorted(run_dir.glob("seed-*"))
    curve_paths = [d / "curve.csv" for d in seed_dirs] if seed_dirs else [run_dir / "curve.csv"]
    curves, checkpoints = [], []
    for cp in curve_paths:
        if not cp.exists():
            continue
        curves.append(LearningCurve.from_csv(cp))
        final = cp.parent / "checkpoint_final.npz"
        checkpoints.append(final if final.exists() else None)
    if not curves:
        raise FileNotFoundError(f"{run_dir}: no curve.csv found")
    finals = []
    for i, c in enumerate(curves):
        try:
            finals.append((i, c.final_iae()))
        except ValueError:
            continue
    if not finals:
        raise FileNotFoundError(f"{run_dir}: no IAE evaluations in curves")
    finals.sort(key=lambda item: item[1])
    median_idx = finals[(len(finals) - 1) // 2][0]
    return cfg, curves, checkpoints[median_idx]


def cmd_report(args) -> int:
    out = _prepare_out(args.out, args.force)
    from . import plots

    groups: dict[str, list[LearningCurve]] = {}
    predictions = {}
    rows = []
    skipped = []
    base_cfg = None
    for run_dir in args.runs:
        label = run_dir.name
        try:
            cfg, curves, median_ckpt = _load_group(run_dir)
        except (FileNotFoundError, ValueError) as exc:
            skipped.append(f"{run_dir}: {exc}")
            continue
        groups[label] = curves
        base_cfg = base_cfg or cfg
        finals = sorted(c.final_iae() for c in curves)
        rows.append({
            "group": label,
            "n_runs": len(curves),
            "final_iae_median": finals[(len(finals) - 1) // 2],
            "final_iae_mean": float(np.mean(finals)),
            "final_iae_min": finals[0],
            "final_iae_max": finals[-1],
        })
        if median_ckpt is not None:
            predictions[label] = median_ckpt

    if not groups:
        raise ConfigError("report: no usable run directories; " + "; ".join(skipped))
    for msg in skipped:
        print(f"skipped: {msg}", file=sys.stderr)

    with open(out / "summary.csv", "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.DictWriter(fh, fieldnames=["group", "n_runs", "final_iae_median",
                                                "final_iae_mean", "final_iae_min", "final_iae_max"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    plots.save_iae_overlay(groups, out / "overlay_iae.svg", title="final comparison")

    # prediction-vs-reference plot for the median run of each group
    cfg = base_cfg or load_config(None)
    ivp = to_ivp(cfg)
    eval_points = int(cfg["reference"]["eval_points"])
    ref_fine = integrate(ivp, int(cfg["reference"]["n_steps"]))
    step = (len(ref_fine) - 1) // eval_points
    ref = Trajectory(times=ivp.t0 + (ivp.horizon - ivp.t0) / eval_points * np.arange(eval_points + 1),
                     states=ref_fine.states[::step])
    pred_trajs = {}
    for label, ckpt in predictions.items():
        try:
            model = load_checkpoint(ckpt)
            pred_trajs[label] = evaluate_on_grid(model, ivp, eval_points)
        except (ConvergenceError, FloatingPointError, FileNotFoundError) as exc:
            print(f"skipped prediction for {label}: {exc}", file=sys.stderr)
    if pred_trajs:
        plots.save_prediction_plot(ref, pred_trajs, out / "prediction.svg")
    print(f"report: {len(groups)} group(s) -> {out}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "reference":
            return cmd_reference(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        if args.command == "report":
            return cmd_report(args)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingAborted, ConvergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
