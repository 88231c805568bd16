"""Runge-Kutta reference trajectories and the integral-of-absolute-error metric.

The reference solution uses the classical fourth-order scheme on a uniform
grid. Model accuracy is summarized by the IAE: the time integral (left
Riemann sum) of the L1 distance between model and reference states on a
shared uniform grid.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .physics import IvpSpec

__all__ = [
    "Trajectory",
    "IaeReport",
    "rk4_step",
    "integrate",
    "evaluate_on_grid",
    "iae",
]


@dataclass
class Trajectory:
    times: np.ndarray   # (N,), strictly increasing
    states: np.ndarray  # (N, state_dim)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).ravel()
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[0] != self.times.size:
            raise ValueError("states must be (len(times), state_dim)")
        if self.times.size >= 2 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")

    def __len__(self) -> int:
        return self.times.size

    def to_csv(self, path) -> None:
        dim = self.states.shape[1]
        header = ["t"] + [f"y{i + 1}" for i in range(dim)]
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(header) + "\n")
            for t, row in zip(self.times, self.states):
                fields = [f"{t:.17g}"] + [f"{v:.17g}" for v in row]
                fh.write(",".join(fields) + "\n")

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(v) for v in row] for row in reader if row]
        data = np.asarray(rows)
        if data.shape[1] != len(header):
            raise ValueError(f"{path}: row width does not match header")
        return cls(times=data[:, 0], states=data[:, 1:])


@dataclass
class IaeReport:
    iae: float
    n_eval_points: int = 1000
    per_point_errors: np.ndarray | None = None

    def __post_init__(self):
        if self.iae < 0:
            raise ValueError("iae must be nonnegative")


def rk4_step(f, t: float, y: np.ndarray, h: float) -> np.ndarray:
    """One classical Runge-Kutta update y + (h/6)(k1 + 2 k2 + 2 k3 + k4)."""
    if h <= 0:
        raise ValueError("step size must be positive")
    y = np.asarray(y, dtype=np.float64)
    k1 = np.asarray(f(t, y), dtype=np.float64)
    k2 = np.asarray(f(t + 0.5 * h, y + 0.5 * h * k1), dtype=np.float64)
    k3 = np.asarray(f(t + 0.5 * h, y + 0.5 * h * k2), dtype=np.float64)
    k4 = np.asarray(f(t + h, y + h * k3), dtype=np.float64)
    if not (np.all(np.isfinite(k1)) and np.all(np.isfinite(k2))
            and np.all(np.isfinite(k3)) and np.all(np.isfinite(k4))):
        raise FloatingPointError(f"non-finite stage value at t={t:.6g}")
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(ivp: IvpSpec, n_steps: int) -> Trajectory:
    """Integrate the IVP with n_steps uniform RK4 steps over [t0, T]."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    h = (ivp.horizon - ivp.t0) / n_steps
    times = ivp.t0 + h * np.arange(n_steps + 1)
    states = np.empty((n_steps + 1, ivp.state_dim))
    y = ivp.y0.ravel().copy()
    states[0] = y
    for k in range(n_steps):
        y = rk4_step(ivp.dynamics, times[k], y, h)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"integration diverged at t={times[k + 1]:.6g}")
        states[k + 1] = y
    return Trajectory(times=times, states=states)


def evaluate_on_grid(model, ivp: IvpSpec, n_points: int) -> Trajectory:
    """Model outputs at n_points+1 equally spaced times covering [t0, T].

    ``model`` is either an object with a vectorized ``predict(ts)`` or a
    plain callable t -> state vector.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    ts = ivp.t0 + (ivp.horizon - ivp.t0) / n_points * np.arange(n_points + 1)
    if hasattr(model, "predict"):
        states = np.asarray(model.predict(ts))
    else:
        states = np.stack([np.ravel(model(float(t))) for t in ts])
    return Trajectory(times=ts, states=states)


def iae(pred: Trajectory, ref: Trajectory, keep_errors: bool = True) -> IaeReport:
    """Left-Riemann integral of the per-point L1 state error over the grid."""
    if len(pred) != len(ref) or not np.array_equal(pred.times, ref.times):
        raise ValueError("trajectories must share an identical time grid")
    if len(pred) < 2:
        raise ValueError("need at least two grid points")
    n = len(pred) - 1
    dt = (pred.times[-1] - pred.times[0]) / n
    err = np.abs(pred.states - ref.states).sum(axis=1)
    value = float(err[:-1].sum() * dt)
    return IaeReport(iae=value, n_eval_points=n, per_point_errors=err if keep_errors else None)
