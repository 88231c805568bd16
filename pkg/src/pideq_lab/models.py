"""Deep equilibrium model with a tanh-affine equilibrium function, its
implicit-function-theorem backward pass, and a feedforward tanh baseline.

The equilibrium model computes ``output = C z*`` where ``z*`` solves
``z = tanh(A z + t a + b)``. The forward fixed point is found by any of the
``rootfind`` solvers on plain arrays; gradients never differentiate through
the forward solver. Instead ``z*`` is inserted into the tape as a custom node
whose backward rule solves the adjoint system ``u^T (I - df/dz) = g^T``
iteratively, and the model's time derivative solves ``(I - df/dz) v = df/dt``
the same way. Both solves are built from recorded primitives, so training
losses that contain the time derivative stay differentiable end to end.

Parameter containers are duck-typed: fields hold plain arrays for numeric
work or tape NodeRefs when an operation should be recorded.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NodeRef, Tape
from .rootfind import (
    SolverConfig,
    SolverResult,
    adjoint_linear_solve,
    linear_fixed_point,
    solve_fixed_point,
    solve_fixed_point_batch,
)

__all__ = [
    "ConvergenceError",
    "PideqParams",
    "PinnParams",
    "PideqGrads",
    "DeqForwardRecord",
    "ModelGraph",
    "init_pideq_params",
    "init_pinn_params",
    "count_parameters",
    "count_null_rows",
    "equilibrium_fn",
    "deq_forward",
    "implicit_vjp",
    "deq_time_derivative",
    "jacobian_frobenius",
    "pinn_forward",
    "PideqModel",
    "PinnModel",
    "make_model",
    "save_checkpoint",
    "load_checkpoint",
]


class ConvergenceError(RuntimeError):
    """A forward, adjoint or sensitivity solve failed to converge."""


@dataclass
class PideqParams:
    A: object  # (n_z, n_z)
    a: object  # (n_z, 1) input injection
    b: object  # (n_z, 1) bias
    C: object  # (n_out, n_z) readout


@dataclass
class PinnParams:
    layers: list  # [(W, b), ...]; tanh on all but the last (linear) layer


@dataclass
class PideqGrads:
    A: object
    a: object
    b: object
    C: object
    t: object


@dataclass
class DeqForwardRecord:
    t: float
    z_star: np.ndarray  # (n_z, 1)
    output: np.ndarray  # (n_out, 1)
    solver: SolverResult


@dataclass
class ModelGraph:
    """Recorded training graph for a batch of time points."""

    outputs: NodeRef        # (n_out, B)
    time_derivs: NodeRef    # (n_out, B)
    penalty: NodeRef | None  # scalar Jacobian-norm penalty, None for the baseline
    param_nodes: dict[str, NodeRef]
    stats: dict[str, float]


def init_pideq_params(n_z: int, n_out: int = 2, seed: int = 0) -> PideqParams:
    """Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] weights; zero injection/bias."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(n_z)
    return PideqParams(
        A=rng.uniform(-bound, bound, size=(n_z, n_z)),
        a=np.zeros((n_z, 1)),
        b=np.zeros((n_z, 1)),
        C=rng.uniform(-bound, bound, size=(n_out, n_z)),
    )


def init_pinn_params(hidden: tuple[int, ...], n_in: int = 1, n_out: int = 2, seed: int = 0) -> PinnParams:
    rng = np.random.default_rng(seed)
    sizes = [n_in, *hidden, n_out]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append((rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros((fan_out, 1))))
    return PinnParams(layers)


def count_parameters(params) -> int:
    if isinstance(params, PinnParams):
        return sum(W.size + b.size for W, b in params.layers)
    return params.A.size + params.a.size + params.b.size + params.C.size


def count_null_rows(A: np.ndarray, threshold: float) -> int:
    """Number of rows of A whose L2 norm is below the threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    return int(np.sum(np.linalg.norm(np.asarray(A), axis=1) < threshold))


# ---------------------------------------------------------------------------
# equilibrium function and forward pass
# ---------------------------------------------------------------------------

def equilibrium_fn(params: PideqParams, t, z):
    """tanh(A z + t a + b); records on a tape when any argument is a NodeRef."""
    az = ad.matmul(params.A, z)
    if isinstance(t, NodeRef):
        ta = ad.smul(t, params.a)
    else:
        ta = ad.scale(float(t), params.a)
    return ad.tanh(ad.add(ad.add(az, ta), params.b))


def _flat_maps(params: PideqParams, t: float):
    """Fixed-point map and its Jacobian on flat vectors, for the solvers."""
    A = params.A
    a = params.a.ravel()
    b = params.b.ravel()

    def g(z):
        return np.tanh(A @ z + t * a + b)

    def jac(z):
        d = 1.0 - np.tanh(A @ z + t * a + b) ** 2
        return d[:, None] * A

    return g, jac


def deq_forward(params: PideqParams, t: float, cfg: SolverConfig) -> DeqForwardRecord:
    """Solve z = tanh(A z + t a + b) from z0 = 0 and read out C z*."""
    n_z = params.A.shape[0]
    g, jac = _flat_maps(params, t)
    result = solve_fixed_point(g, np.zeros(n_z), cfg, jac=jac)
    z = result.solution.reshape(-1, 1)
    return DeqForwardRecord(t=float(t), z_star=z, output=params.C @ z, solver=result)


def _is_lifted(params: PideqParams) -> bool:
    return isinstance(params.A, NodeRef)


def _fixpoint_node(tape: Tape, params: PideqParams, ts_row: np.ndarray,
                   z_star: np.ndarray, cfg: SolverConfig) -> NodeRef:
    """Insert the solved equilibrium into the tape.

    The node's value is z* (one column per time point); its backward rule
    applies the implicit function theorem: incoming cotangents are pushed
    through ``u <- g + (df/dz)^T u`` and then into A, a, b via the exact
    partials of the equilibrium function at (t, z*). In recording mode the
    rule is built from tape primitives, so it can be differentiated again.
    """
    ts_row = np.asarray(ts_row, dtype=np.float64).reshape(1, -1)
    z_star = np.asarray(z_star, dtype=np.float64)
    ones_col = np.ones((ts_row.shape[1], 1))
    holder: dict[str, NodeRef] = {}

    def vjp(ctx, grad):
        recording = isinstance(ctx, ad._GraphCtx)
        if recording:
            A, a_, b_ = params.A, params.a, params.b
            zs = holder["ref"]
        else:
            A, a_, b_ = params.A.value, params.a.value, params.b.value
            zs = z_star
        d = ad.sub(np.ones(z_star.shape), ad.mul(zs, zs))
        At = ad.transpose(A)
        u, info = adjoint_linear_solve(lambda v: ad.matmul(At, ad.mul(d, v)), grad, cfg)
        if not info.converged:
            raise ConvergenceError(
                f"adjoint solve stalled: residual {info.residual_norm:.3e} after {info.iterations} iterations"
            )
        p = ad.mul(d, u)
        return (
            (params.A.index, ad.matmul(p, ad.transpose(zs))),
            (params.a.index, ad.matmul(p, ts_row.T)),
            (params.b.index, ad.matmul(p, ones_col)),
        )

    ref = tape.custom(z_star, (params.A, params.a, params.b), vjp)
    holder["ref"] = ref
    return ref


def _zstar_rep(params: PideqParams, record: DeqForwardRecord, cfg: SolverConfig):
    """z* as a plain array, or as an implicit tape node when params are lifted."""
    if not _is_lifted(params):
        return record.z_star
    tape = params.A.tape
    return _fixpoint_node(tape, params, np.array([[record.t]]), record.z_star, cfg)


def implicit_vjp(params: PideqParams, record: DeqForwardRecord, cotangent, cfg: SolverConfig) -> PideqGrads:
    """Pull an output cotangent back to gradients over (A, a, b, C, t).

    Solves ``u^T (I - df/dz) = (C^T cotangent)^T`` with the iterative adjoint
    solve, then applies the exact vector-Jacobian products of the equilibrium
    function. With lifted (NodeRef) params every step is recorded, so the
    returned gradients can be differentiated again.
    """
    if not record.solver.converged:
        raise ValueError("implicit_vjp requires a converged forward record")
    cot = cotangent if isinstance(cotangent, NodeRef) else ad.as_value(cotangent)
    zs = _zstar_rep(params, record, cfg)
    d = ad.sub(np.ones(record.z_star.shape), ad.mul(zs, zs))
    w = ad.matmul(ad.transpose(params.C), cot)
    At = ad.transpose(params.A)
    u, info = adjoint_linear_solve(lambda v: ad.matmul(At, ad.mul(d, v)), w, cfg)
    if not info.converged:
        raise ConvergenceError(
            f"adjoint solve stalled: residual {info.residual_norm:.3e} after {info.iterations} iterations"
        )
    p = ad.mul(d, u)
    return PideqGrads(
        A=ad.matmul(p, ad.transpose(zs)),
        a=ad.scale(record.t, p),
        b=p,
        C=ad.matmul(cot, ad.transpose(zs)),
        t=ad.matmul(ad.transpose(params.a), p),
    )


def deq_time_derivative(params: PideqParams, record: DeqForwardRecord, cfg: SolverConfig):
    """d(output)/dt via the sensitivity solve (I - df/dz) v = df/dt.

    Returns C v. Recorded (and differentiable) when params are lifted.
    """
    if not record.solver.converged:
        raise ValueError("deq_time_derivative requires a converged forward record")
    zs = _zstar_rep(params, record, cfg)
    d = ad.sub(np.ones(record.z_star.shape), ad.mul(zs, zs))
    ft = ad.mul(d, params.a)
    v, info = linear_fixed_point(lambda x: ad.mul(d, ad.matmul(params.A, x)), ft, cfg)
    if not info.converged:
        raise ConvergenceError(
            f"sensitivity solve stalled: residual {info.residual_norm:.3e} after {info.iterations} iterations"
        )
    return ad.matmul(params.C, v)


def jacobian_frobenius(params: PideqParams, record: DeqForwardRecord):
    """Frobenius norm of df/dz = diag(1 - z*^2) A at the record's equilibrium.

    Uses the closed form ||diag(d) A||_F^2 = sum_i d_i^2 ||A_i.||^2.
    """
    zs = _zstar_rep(params, record, SolverConfig()) if _is_lifted(params) else record.z_star
    d = ad.sub(np.ones(record.z_star.shape), ad.mul(zs, zs))
    row_sq = ad.matmul(ad.mul(params.A, params.A), np.ones((record.z_star.shape[0], 1)))
    s = ad.matmul(ad.transpose(ad.mul(d, d)), row_sq)
    out = ad.power(s, 0.5)
    return out if isinstance(out, NodeRef) else float(out[0, 0])


# ---------------------------------------------------------------------------
# feedforward tanh baseline
# ---------------------------------------------------------------------------

def pinn_forward(params: PinnParams, t):
    """Feedforward tanh network with a linear output layer, at one time point."""
    h = t if isinstance(t, NodeRef) else ad.as_value(float(t))
    for W, b in params.layers[:-1]:
        h = ad.tanh(ad.add(ad.matmul(W, h), b))
    W, b = params.layers[-1]
    return ad.add(ad.matmul(W, h), b)


# ---------------------------------------------------------------------------
# trainable model wrappers
# ---------------------------------------------------------------------------

class PideqModel:
    """Equilibrium model bound to a forward solver configuration."""

    kind = "pideq"

    def __init__(self, params: PideqParams, solver: SolverConfig, seed: int = 0):
        self.params = params
        self.solver = solver
        self.seed = int(seed)

    @property
    def n_z(self) -> int:
        return self.params.A.shape[0]

    def params_dict(self) -> dict[str, np.ndarray]:
        p = self.params
        return {"A": p.A, "a": p.a, "b": p.b, "C": p.C}

    def with_params(self, values: dict[str, np.ndarray]) -> "PideqModel":
        return PideqModel(PideqParams(values["A"], values["a"], values["b"], values["C"]),
                          self.solver, self.seed)

    def solve_point(self, t: float) -> DeqForwardRecord:
        return deq_forward(self.params, t, self.solver)

    def _solve_batch(self, ts: np.ndarray):
        """All fixed points of a batch of times in lockstep (columns are independent)."""
        A, a, b, = self.params.A, self.params.a, self.params.b
        ts_row = ts.reshape(1, -1)

        def g(Z):
            return np.tanh(A @ Z + a @ ts_row + b)

        def jac(Z):
            d = 1.0 - np.tanh(A @ Z + a @ ts_row + b) ** 2
            return d.T[:, :, None] * A[None, :, :]

        Z, iters, evals, converged, residuals = solve_fixed_point_batch(
            g, np.zeros((self.n_z, ts.size)), self.solver, jac=jac)
        if not converged.all():
            bad = np.flatnonzero(~converged)
            t_bad = ", ".join(f"{ts[j]:.6g}" for j in bad[:5])
            raise ConvergenceError(
                f"forward solve failed for {bad.size} point(s), e.g. t = {t_bad} "
                f"(worst residual {np.max(residuals[bad]):.3e})"
            )
        return Z, iters, evals

    def predict(self, ts) -> np.ndarray:
        """Model outputs on a 1-D array of times, shape (len(ts), n_out)."""
        ts = np.asarray(ts, dtype=np.float64).ravel()
        Z, _, _ = self._solve_batch(ts)
        return (self.params.C @ Z).T

    def build_graph(self, tape: Tape, ts) -> ModelGraph:
        ts = np.asarray(ts, dtype=np.float64).ravel()
        B = ts.size
        Z, iters, evals = self._solve_batch(ts)

        lifted = PideqParams(
            A=tape.input(self.params.A),
            a=tape.input(self.params.a),
            b=tape.input(self.params.b),
            C=tape.input(self.params.C),
        )
        zs = _fixpoint_node(tape, lifted, ts.reshape(1, -1), Z, self.solver)
        d = ad.sub(np.ones(Z.shape), ad.mul(zs, zs))

        # sensitivity solve for all columns at once: V = df/dt + (df/dz) V
        ones_row = tape.const(np.ones((1, B)))
        ft = ad.mul(d, ad.matmul(lifted.a, ones_row))
        v, info = linear_fixed_point(lambda x: ad.mul(d, ad.matmul(lifted.A, x)), ft, self.solver)
        if not info.converged:
            raise ConvergenceError(
                f"sensitivity solve stalled: residual {info.residual_norm:.3e} after {info.iterations} iterations"
            )

        outputs = ad.matmul(lifted.C, zs)
        time_derivs = ad.matmul(lifted.C, v)

        # mean over the batch of ||diag(d) A||_F
        row_sq = ad.matmul(ad.mul(lifted.A, lifted.A), np.ones((self.n_z, 1)))
        per_point = ad.matmul(ad.transpose(row_sq), ad.mul(d, d))
        penalty = ad.scale(1.0 / B, ad.sum_all(ad.power(per_point, 0.5)))

        stats = {
            "solver_iterations_mean": float(np.mean(iters)),
            "g_evals_mean": float(np.mean(evals)),
            "sensitivity_iterations": float(info.iterations),
        }
        return ModelGraph(outputs, time_derivs, penalty,
                          {"A": lifted.A, "a": lifted.a, "b": lifted.b, "C": lifted.C}, stats)


class PinnModel:
    """Feedforward tanh baseline with the same training-graph interface."""

    kind = "pinn"

    def __init__(self, params: PinnParams, seed: int = 0):
        self.params = params
        self.seed = int(seed)

    def params_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(self.params.layers):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        return out

    def with_params(self, values: dict[str, np.ndarray]) -> "PinnModel":
        n = len(self.params.layers)
        layers = [(values[f"W{i}"], values[f"b{i}"]) for i in range(n)]
        return PinnModel(PinnParams(layers), self.seed)

    def predict(self, ts) -> np.ndarray:
        h = np.asarray(ts, dtype=np.float64).reshape(1, -1)
        for W, b in self.params.layers[:-1]:
            h = np.tanh(W @ h + b)
        W, b = self.params.layers[-1]
        return (W @ h + b).T

    def build_graph(self, tape: Tape, ts) -> ModelGraph:
        ts = np.asarray(ts, dtype=np.float64).ravel()
        B = ts.size
        x = tape.input(ts.reshape(1, -1))
        lifted = [(tape.input(W), tape.input(b)) for W, b in self.params.layers]
        ones_row = tape.const(np.ones((1, B)))

        h = x
        for W, b in lifted[:-1]:
            h = ad.tanh(ad.add(ad.matmul(W, h), ad.matmul(b, ones_row)))
        W, b = lifted[-1]
        y = ad.add(ad.matmul(W, h), ad.matmul(b, ones_row))

        # per-point time derivative: columns are independent, so the gradient
        # of each output-row sum w.r.t. the input row is exactly dy_i/dt_j
        n_out = y.shape[0]
        deriv_rows = []
        for i in range(n_out):
            s = ad.sum_all(ad.rows(y, i, i + 1))
            deriv_rows.append(ad.gradient(tape, s, [x], create_graph=True)[x])
        dy = deriv_rows[0]
        for row in deriv_rows[1:]:
            dy = ad.stack_rows(dy, row)

        param_nodes = {}
        for i, (W, b) in enumerate(lifted):
            param_nodes[f"W{i}"] = W
            param_nodes[f"b{i}"] = b
        stats = {"solver_iterations_mean": 0.0, "g_evals_mean": 0.0, "sensitivity_iterations": 0.0}
        return ModelGraph(y, dy, None, param_nodes, stats)


def make_model(kind: str, *, n_z: int | None = None, hidden: tuple[int, ...] | None = None,
               solver: SolverConfig | None = None, seed: int = 0, n_out: int = 2):
    if kind == "pideq":
        if n_z is None:
            raise ValueError("pideq model needs n_z")
        return PideqModel(init_pideq_params(n_z, n_out, seed), solver or SolverConfig(), seed)
    if kind == "pinn":
        if not hidden:
            raise ValueError("pinn model needs hidden layer sizes")
        return PinnModel(init_pinn_params(tuple(hidden), 1, n_out, seed), seed)
    raise ValueError(f"unknown model kind '{kind}'")


# ---------------------------------------------------------------------------
# checkpoints: npz with a JSON header; round-trips are bit-exact
# ---------------------------------------------------------------------------

def save_checkpoint(path, model) -> None:
    if model.kind == "pideq":
        header = {"kind": "pideq", "n_z": model.n_z, "seed": model.seed,
                  "solver": model.solver.method, "tolerance": model.solver.tolerance}
    else:
        sizes = [W.shape[0] for W, _ in model.params.layers[:-1]]
        header = {"kind": "pinn", "hidden": sizes, "seed": model.seed}
    np.savez(path, __header__=np.array(json.dumps(header, sort_keys=True)), **model.params_dict())


def load_checkpoint(path, solver: SolverConfig | None = None):
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"][()]))
        arrays = {k: data[k] for k in data.files if k != "__header__"}
    if header["kind"] == "pideq":
        params = PideqParams(arrays["A"], arrays["a"], arrays["b"], arrays["C"])
        cfg = solver or SolverConfig(method=header.get("solver", "anderson"),
                                     tolerance=header.get("tolerance", 1e-4))
        return PideqModel(params, cfg, header.get("seed", 0))
    if header["kind"] == "pinn":
        n_layers = len(header["hidden"]) + 1
        layers = [(arrays[f"W{i}"], arrays[f"b{i}"]) for i in range(n_layers)]
        return PinnModel(PinnParams(layers), header.get("seed", 0))
    raise ValueError(f"unknown checkpoint kind '{header['kind']}'")
