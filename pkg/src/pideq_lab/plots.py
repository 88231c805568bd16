"""Figure rendering for the report path.

All figures are written as SVG files next to the CSV data they visualize;
nothing here is needed for training itself.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .reference import Trajectory
from .training import LearningCurve, moving_average

__all__ = [
    "save_state_space",
    "save_loss_plot",
    "save_iae_plot",
    "save_iae_overlay",
    "save_prediction_plot",
]

MA_WINDOW = 100  # epochs of smoothing applied to displayed curves


def save_state_space(traj: Trajectory, path, title: str = "State space") -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(traj.states[:, 0], traj.states[:, 1], lw=1.2)
    ax.plot(traj.states[0, 0], traj.states[0, 1], "o", ms=5, label="start")
    ax.set_xlabel("$y_1$")
    ax.set_ylabel("$y_2$")
    ax.set_title(title)
    ax.legend()
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)


def _smoothed(values, window: int) -> np.ndarray:
    return moving_average(np.asarray(values, dtype=np.float64), window)


def save_loss_plot(curves: list[LearningCurve], labels: list[str], path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for curve, label in zip(curves, labels):
        ax.plot(curve.epochs, _smoothed(curve.total, MA_WINDOW), lw=1.0, label=label)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel(f"total loss ({MA_WINDOW}-epoch moving average)")
    ax.legend(fontsize=8)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)


def _iae_series(curve: LearningCurve):
    pairs = curve.eval_epochs()
    epochs = np.array([e for e, _ in pairs])
    values = np.array([v for _, v in pairs])
    return epochs, values


def _ma_window_for_evals(epochs: np.ndarray) -> int:
    if epochs.size < 2:
        return 1
    spacing = max(1, int(round(np.median(np.diff(epochs)))))
    return max(1, MA_WINDOW // spacing)


def save_iae_plot(curves: list[LearningCurve], labels: list[str], path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for curve, label in zip(curves, labels):
        epochs, values = _iae_series(curve)
        if epochs.size == 0:
            continue
        ax.plot(epochs, _smoothed(values, _ma_window_for_evals(epochs)), lw=1.0, label=label)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("IAE")
    ax.legend(fontsize=8)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)


def save_iae_overlay(groups: dict[str, list[LearningCurve]], path, title: str = "") -> None:
    """Mean IAE per group with a min/max envelope across its runs."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, curves in groups.items():
        series = [_iae_series(c) for c in curves if c.eval_epochs()]
        if not series:
            continue
        n = min(s[0].size for s in series)
        epochs = series[0][0][:n]
        stack = np.stack([s[1][:n] for s in series])
        window = _ma_window_for_evals(epochs)
        mean = _smoothed(stack.mean(axis=0), window)
        lo = _smoothed(stack.min(axis=0), window)
        hi = _smoothed(stack.max(axis=0), window)
        line, = ax.plot(epochs, mean, lw=1.2, label=f"{label} (n={len(series)})")
        ax.fill_between(epochs, lo, hi, alpha=0.2, color=line.get_color(), lw=0)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("IAE")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)


def save_prediction_plot(ref: Trajectory, predictions: dict[str, Trajectory], path) -> None:
    """Reference and model trajectories on the same grid, one panel per state."""
    dim = ref.states.shape[1]
    fig, axes = plt.subplots(dim, 1, figsize=(7, 2.8 * dim), sharex=True)
    axes = np.atleast_1d(axes)
    for i, ax in enumerate(axes):
        ax.plot(ref.times, ref.states[:, i], "k-", lw=1.4, label="RK4 reference")
        for label, traj in predictions.items():
            ax.plot(traj.times, traj.states[:, i], "--", lw=1.1, label=label)
        ax.set_ylabel(f"$y_{i + 1}$")
    axes[-1].set_xlabel("t [s]")
    axes[0].legend(fontsize=8)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
