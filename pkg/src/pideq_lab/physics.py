"""Van der Pol initial value problem and the physics-informed loss.

The training objective is ``J = J_b + lambda * J_N + kappa * penalty`` where
``J_b`` penalizes the squared deviation from the initial condition, ``J_N``
sums the squared ODE residual ``||d(model)/dt - N(t, model(t))||^2`` over the
collocation points (a sum, not a mean, which interacts with the lambda
weight), and the penalty is the Frobenius norm of the equilibrium function's
state Jacobian (defined as zero for models without one).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np

from . import autodiff as ad
from .autodiff import NodeRef, Tape

__all__ = [
    "IvpSpec",
    "VdpConfig",
    "LossWeights",
    "TotalLossResult",
    "vdp_dynamics",
    "vdp_ivp",
    "sample_collocation",
    "boundary_loss",
    "physics_loss",
    "total_loss",
]


@dataclass(frozen=True)
class VdpConfig:
    mu: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.mu):
            raise ValueError("mu must be finite")


@dataclass(frozen=True)
class IvpSpec:
    dynamics: object          # callable (t, y) -> dy/dt
    t0: float
    y0: np.ndarray            # (state_dim, 1)
    horizon: float            # end time T
    state_dim: int

    def __post_init__(self):
        object.__setattr__(self, "y0", ad.as_value(self.y0))
        if self.horizon <= self.t0:
            raise ValueError("horizon must exceed t0")
        if self.y0.shape != (self.state_dim, 1):
            raise ValueError(f"y0 shape {self.y0.shape} does not match state_dim {self.state_dim}")


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.1    # weight of the ODE-residual term
    kappa: float = 1.0  # weight of the Jacobian-norm penalty

    def __post_init__(self):
        if self.lam < 0 or self.kappa < 0:
            raise ValueError("loss weights must be nonnegative")


def vdp_dynamics(t, y, cfg: VdpConfig = VdpConfig()):
    """Van der Pol field (y2, mu (1 - y1^2) y2 - y1).

    Accepts a flat 2-vector (plain numpy, used by the integrator), a (2, B)
    matrix of states, or tape NodeRefs of those shapes.
    """
    if not isinstance(y, NodeRef):
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            return np.array([y[1], cfg.mu * (1.0 - y[0] ** 2) * y[1] - y[0]])
    y1 = ad.rows(y, 0, 1)
    y2 = ad.rows(y, 1, 2)
    ones = np.ones(ad.value_of(y1).shape)
    dy2 = ad.sub(ad.mul(ad.scale(cfg.mu, ad.sub(ones, ad.mul(y1, y1))), y2), y1)
    return ad.stack_rows(y2, dy2)


def vdp_ivp(cfg: VdpConfig = VdpConfig(), t0: float = 0.0, y0=(0.0, 0.1), horizon: float = 2.0) -> IvpSpec:
    return IvpSpec(dynamics=partial(vdp_dynamics, cfg=cfg), t0=float(t0),
                   y0=np.asarray(y0, dtype=np.float64).reshape(-1, 1),
                   horizon=float(horizon), state_dim=len(np.ravel(y0)))


def sample_collocation(ivp: IvpSpec, n: int, rng_seed: int) -> np.ndarray:
    """n i.i.d. uniform draws from [t0, T]; deterministic in the seed."""
    if n < 1:
        raise ValueError("need at least one collocation point")
    rng = np.random.default_rng(rng_seed)
    return rng.uniform(ivp.t0, ivp.horizon, size=n)


def boundary_loss(model_output_at_t0, ivp: IvpSpec):
    """Squared L2 deviation of the model's t0 output from the initial condition."""
    out = model_output_at_t0 if isinstance(model_output_at_t0, NodeRef) else ad.as_value(model_output_at_t0)
    if out.shape != ivp.y0.shape:
        raise ValueError(f"output shape {out.shape} does not match y0 shape {ivp.y0.shape}")
    result = ad.sq_norm(ad.sub(out, ivp.y0))
    return result if isinstance(result, NodeRef) else float(result[0, 0])


def _residual_loss(graph_dy, graph_y, ivp: IvpSpec, ts_row: np.ndarray):
    target = ivp.dynamics(ts_row, graph_y)
    return ad.sq_norm(ad.sub(graph_dy, target))


def physics_loss(model, ivp: IvpSpec, points) -> float:
    """Sum over the points of the squared ODE residual of the model."""
    points = np.asarray(points, dtype=np.float64).ravel()
    if points.size < 1:
        raise ValueError("need at least one point")
    tape = Tape()
    graph = model.build_graph(tape, points)
    loss = _residual_loss(graph.time_derivs, graph.outputs, ivp, points.reshape(1, -1))
    return float(ad.value_of(loss)[0, 0])


@dataclass
class TotalLossResult:
    total: float
    j_b: float
    j_n: float
    penalty: float
    tape: Tape
    total_node: NodeRef
    param_nodes: dict[str, NodeRef]
    stats: dict[str, float]


def total_loss(model, ivp: IvpSpec, points, weights: LossWeights) -> TotalLossResult:
    """Build the full training objective on a fresh tape.

    One batched graph covers the initial condition (column 0) and the
    collocation points (remaining columns), so the boundary and residual
    terms share the forward solves.
    """
    points = np.asarray(points, dtype=np.float64).ravel()
    if points.size < 1:
        raise ValueError("need at least one collocation point")
    tape = Tape()
    ts_all = np.concatenate(([ivp.t0], points))
    graph = model.build_graph(tape, ts_all)
    B = points.size

    y_at_t0 = ad.cols(graph.outputs, 0, 1)
    j_b = boundary_loss(y_at_t0, ivp)

    y_pts = ad.cols(graph.outputs, 1, B + 1)
    dy_pts = ad.cols(graph.time_derivs, 1, B + 1)
    j_n = _residual_loss(dy_pts, y_pts, ivp, points.reshape(1, -1))

    total_node = ad.add(j_b, ad.scale(weights.lam, j_n))
    if graph.penalty is not None:
        total_node = ad.add(total_node, ad.scale(weights.kappa, graph.penalty))
        penalty_val = float(graph.penalty.value[0, 0])
    else:
        penalty_val = 0.0

    return TotalLossResult(
        total=float(total_node.value[0, 0]),
        j_b=float(j_b.value[0, 0]),
        j_n=float(j_n.value[0, 0]),
        penalty=penalty_val,
        tape=tape,
        total_node=total_node,
        param_nodes=graph.param_nodes,
        stats=graph.stats,
    )
