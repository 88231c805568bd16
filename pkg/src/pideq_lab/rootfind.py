"""Fixed-point solvers for z = g(z) and the iterative linear solve used by
the differentiable backward pass.

All solvers work on flat 1-D float64 vectors and are pure functions of
(g, z0, cfg). Convergence uses the relative residual
``||g(z) - z|| / max(1, ||z||) <= tolerance``. A residual above 1e8 or any
non-finite iterate counts as divergence and yields ``converged=False``
rather than an exception.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

__all__ = [
    "SolverConfig",
    "SolverResult",
    "simple_iteration",
    "anderson",
    "broyden",
    "newton",
    "solve_fixed_point",
    "solve_fixed_point_batch",
    "linear_fixed_point",
    "adjoint_linear_solve",
]

DIVERGENCE_LIMIT = 1e8

METHODS = ("simple", "anderson", "broyden", "newton")


@dataclass(frozen=True)
class SolverConfig:
    method: str = "anderson"
    tolerance: float = 1e-4
    max_iterations: int = 200
    anderson_memory: int = 5
    anderson_damping: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown solver method '{self.method}' (choose from {METHODS})")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.anderson_memory < 0:
            raise ValueError("anderson_memory must be >= 0")
        if not (0.0 < self.anderson_damping <= 1.0):
            raise ValueError("anderson_damping must be in (0, 1]")


@dataclass
class SolverResult:
    solution: np.ndarray
    iterations: int
    residual_norm: float
    converged: bool
    g_evals: int = 0
    trace: list[float] | None = None
    message: str = ""

    def __post_init__(self):
        # contract: a converged flag implies the residual criterion held
        assert not (self.converged and not np.isfinite(self.residual_norm)), "converged with non-finite residual"


def _rel_residual(gz: np.ndarray, z: np.ndarray) -> float:
    return float(np.linalg.norm(gz - z) / max(1.0, np.linalg.norm(z)))


def _diverged(gz: np.ndarray, z: np.ndarray, resid: float) -> bool:
    if not np.all(np.isfinite(gz)) or not np.isfinite(resid):
        return True
    return float(np.linalg.norm(gz - z)) > DIVERGENCE_LIMIT


def simple_iteration(g, z0, cfg: SolverConfig, keep_trace: bool = False) -> SolverResult:
    """Plain fixed-point iteration z <- g(z)."""
    z = np.asarray(z0, dtype=np.float64).copy()
    trace: list[float] | None = [] if keep_trace else None
    evals = 0
    resid = np.inf
    for it in range(cfg.max_iterations):
        gz = g(z)
        evals += 1
        if not np.all(np.isfinite(gz)):
            return SolverResult(z, it, np.inf, False, evals, trace, "non-finite iterate")
        resid = _rel_residual(gz, z)
        if trace is not None:
            trace.append(resid)
        if resid <= cfg.tolerance:
            return SolverResult(z, it, resid, True, evals, trace)
        if _diverged(gz, z, resid):
            return SolverResult(z, it, resid, False, evals, trace, "diverged")
        z = gz
    return SolverResult(z, cfg.max_iterations, resid, False, evals, trace, "max_iterations reached")


def anderson(g, z0, cfg: SolverConfig, keep_trace: bool = False) -> SolverResult:
    """Anderson-accelerated fixed-point iteration.

    Least-squares extrapolation over a memory of recent residual differences,
    solved via regularized normal equations. With memory 0 and damping 1 the
    iterate sequence is bitwise identical to ``simple_iteration``.
    """
    beta = cfg.anderson_damping
    m = cfg.anderson_memory
    reg = 1e-10
    z = np.asarray(z0, dtype=np.float64).copy()
    trace: list[float] | None = [] if keep_trace else None
    evals = 0
    dz_hist: list[np.ndarray] = []  # z_{k+1} - z_k
    df_hist: list[np.ndarray] = []  # f_{k+1} - f_k, with f = g(z) - z
    f_prev = None
    z_prev = None
    resid = np.inf
    for it in range(cfg.max_iterations):
        gz = g(z)
        evals += 1
        if not np.all(np.isfinite(gz)):
            return SolverResult(z, it, np.inf, False, evals, trace, "non-finite iterate")
        resid = _rel_residual(gz, z)
        if trace is not None:
            trace.append(resid)
        if resid <= cfg.tolerance:
            return SolverResult(z, it, resid, True, evals, trace)
        if _diverged(gz, z, resid):
            return SolverResult(z, it, resid, False, evals, trace, "diverged")

        f = gz - z
        if f_prev is not None and m > 0:
            dz_hist.append(z - z_prev)
            df_hist.append(f - f_prev)
            if len(dz_hist) > m:
                dz_hist.pop(0)
                df_hist.pop(0)
        z_prev = z
        f_prev = f

        if not df_hist:
            # no history yet (or memory 0): damped plain step
            z = (1.0 - beta) * z + beta * gz
        else:
            dF = np.stack(df_hist, axis=1)
            dZ = np.stack(dz_hist, axis=1)
            k = dF.shape[1]
            # (dF^T dF + reg I) gamma = dF^T f
            gram = dF.T @ dF + reg * np.eye(k)
            try:
                gamma = np.linalg.solve(gram, dF.T @ f)
            except np.linalg.LinAlgError:
                gamma = np.zeros(k)
            z = z + beta * f - (dZ + beta * dF) @ gamma
    return SolverResult(z, cfg.max_iterations, resid, False, evals, trace, "max_iterations reached")


def broyden(g, z0, cfg: SolverConfig, keep_trace: bool = False) -> SolverResult:
    """Quasi-Newton iteration with rank-one updates to an approximate inverse
    Jacobian of the residual r(z) = g(z) - z ("good Broyden").

    The inverse Jacobian starts at -I so the first step follows the simple
    iteration direction.
    """
    z = np.asarray(z0, dtype=np.float64).copy()
    n = z.size
    H = -np.eye(n)
    trace: list[float] | None = [] if keep_trace else None
    evals = 0

    gz = g(z)
    evals += 1
    if not np.all(np.isfinite(gz)):
        return SolverResult(z, 0, np.inf, False, evals, trace, "non-finite iterate")
    r = gz - z
    resid = _rel_residual(gz, z)
    if trace is not None:
        trace.append(resid)
    if resid <= cfg.tolerance:
        return SolverResult(z, 0, resid, True, evals, trace)

    for it in range(1, cfg.max_iterations + 1):
        dz = -H @ r
        z_new = z + dz
        gz = g(z_new)
        evals += 1
        if not np.all(np.isfinite(gz)):
            return SolverResult(z, it, np.inf, False, evals, trace, "non-finite iterate")
        r_new = gz - z_new
        resid = _rel_residual(gz, z_new)
        if trace is not None:
            trace.append(resid)
        if resid <= cfg.tolerance:
            return SolverResult(z_new, it, resid, True, evals, trace)
        if _diverged(gz, z_new, resid):
            return SolverResult(z_new, it, resid, False, evals, trace, "diverged")
        dr = r_new - r
        Hdr = H @ dr
        denom = float(dz @ Hdr)
        if abs(denom) > 1e-14:
            H = H + np.outer((dz - Hdr) / denom, dz @ H)
        z, r = z_new, r_new
    return SolverResult(z, cfg.max_iterations, resid, False, evals, trace, "max_iterations reached")


def newton(g, z0, cfg: SolverConfig, jac, keep_trace: bool = False) -> SolverResult:
    """Newton's method on the residual g(z) - z.

    Each step solves (dg/dz - I) dz = -(g(z) - z) densely; ``jac`` must return
    the Jacobian dg/dz at a point (callers supply the closed form or an
    autodiff-derived one). A singular system raises ``np.linalg.LinAlgError``.
    """
    z = np.asarray(z0, dtype=np.float64).copy()
    n = z.size
    eye = np.eye(n)
    trace: list[float] | None = [] if keep_trace else None
    evals = 0
    resid = np.inf
    for it in range(cfg.max_iterations):
        gz = g(z)
        evals += 1
        if not np.all(np.isfinite(gz)):
            return SolverResult(z, it, np.inf, False, evals, trace, "non-finite iterate")
        resid = _rel_residual(gz, z)
        if trace is not None:
            trace.append(resid)
        if resid <= cfg.tolerance:
            return SolverResult(z, it, resid, True, evals, trace)
        if _diverged(gz, z, resid):
            return SolverResult(z, it, resid, False, evals, trace, "diverged")
        J = np.asarray(jac(z), dtype=np.float64).reshape(n, n)
        dz = np.linalg.solve(J - eye, -(gz - z))
        z = z + dz
    return SolverResult(z, cfg.max_iterations, resid, False, evals, trace, "max_iterations reached")


def solve_fixed_point(g, z0, cfg: SolverConfig, jac=None, keep_trace: bool = False) -> SolverResult:
    """Dispatch to the solver selected by ``cfg.method``."""
    if cfg.method == "simple":
        return simple_iteration(g, z0, cfg, keep_trace)
    if cfg.method == "anderson":
        return anderson(g, z0, cfg, keep_trace)
    if cfg.method == "broyden":
        return broyden(g, z0, cfg, keep_trace)
    if cfg.method == "newton":
        if jac is None:
            raise ValueError("newton requires a Jacobian callable")
        return newton(g, z0, cfg, jac, keep_trace)
    raise ValueError(f"unknown method {cfg.method}")


def solve_fixed_point_batch(g, Z0: np.ndarray, cfg: SolverConfig, jac=None):
    """Solve many independent fixed-point problems at once.

    ``g`` maps an (n, B) matrix to an (n, B) matrix columnwise (column j of
    the output depends only on column j of the input), so the B problems are
    solved in lockstep with per-column convergence tracking. Columns freeze
    once converged. Returns ``(Z, iterations, g_evals, converged, residuals)``
    with per-column arrays; iteration/evaluation counts match what the
    per-vector solvers report on each column alone.
    """
    Z = np.asarray(Z0, dtype=np.float64).copy()
    n, B = Z.shape
    iters = np.full(B, cfg.max_iterations, dtype=int)
    evals = np.zeros(B, dtype=int)
    converged = np.zeros(B, dtype=bool)
    failed = np.zeros(B, dtype=bool)
    residuals = np.full(B, np.inf)

    def _check(GZ, Zc, k):
        """Mark convergence / divergence; returns per-column residuals."""
        finite = np.all(np.isfinite(GZ), axis=0)
        diff = np.where(finite, np.linalg.norm(np.where(np.isfinite(GZ), GZ, 0.0) - Zc, axis=0), np.inf)
        rel = diff / np.maximum(1.0, np.linalg.norm(Zc, axis=0))
        active = ~(converged | failed)
        hit = active & finite & (rel <= cfg.tolerance)
        converged[hit] = True
        iters[hit] = k
        residuals[hit] = rel[hit]
        bad = active & (~finite | (diff > DIVERGENCE_LIMIT))
        failed[bad] = True
        iters[bad] = k
        residuals[bad] = rel[bad]
        return rel

    with np.errstate(over="ignore", invalid="ignore"):
        if cfg.method == "simple" or cfg.method == "anderson":
            beta = cfg.anderson_damping if cfg.method == "anderson" else 1.0
            m = cfg.anderson_memory if cfg.method == "anderson" else 0
            reg = 1e-10
            dz_hist: list[np.ndarray] = []
            df_hist: list[np.ndarray] = []
            Z_prev = None
            F_prev = None
            for k in range(cfg.max_iterations):
                active = ~(converged | failed)
                if not active.any():
                    break
                GZ = g(Z)
                evals[active] += 1
                _check(GZ, Z, k)
                active = ~(converged | failed)
                if not active.any():
                    break
                F = GZ - Z
                if F_prev is not None and m > 0:
                    dz_hist.append(Z - Z_prev)
                    df_hist.append(F - F_prev)
                    if len(dz_hist) > m:
                        dz_hist.pop(0)
                        df_hist.pop(0)
                Z_prev = Z.copy()
                F_prev = F
                if not df_hist:
                    Z_new = (1.0 - beta) * Z + beta * GZ
                else:
                    dF = np.stack(df_hist)            # (k, n, B)
                    dZ = np.stack(dz_hist)
                    kk = dF.shape[0]
                    gram = np.einsum("inb,jnb->bij", dF, dF) + reg * np.eye(kk)
                    rhs = np.einsum("inb,nb->bi", dF, F)
                    try:
                        gamma = np.linalg.solve(gram, rhs[..., None])[..., 0]
                    except np.linalg.LinAlgError:
                        gamma = np.zeros((B, kk))
                    gamma = np.where(np.isfinite(gamma), gamma, 0.0)
                    Z_new = Z + beta * F - np.einsum("inb,bi->nb", dZ + beta * dF, gamma)
                Z[:, active] = Z_new[:, active]
        elif cfg.method == "broyden":
            eye = np.eye(n)
            H = np.tile(-eye, (B, 1, 1))
            GZ = g(Z)
            evals[:] = 1
            _check(GZ, Z, 0)
            R = GZ - Z
            for k in range(1, cfg.max_iterations + 1):
                active = ~(converged | failed)
                if not active.any():
                    break
                dz = np.einsum("bij,jb->ib", H, -R)
                Z_new = np.where(active, Z + dz, Z)
                GZ = g(Z_new)
                evals[active] += 1
                _check(GZ, Z_new, k)
                R_new = GZ - Z_new
                dr = R_new - R
                Hdr = np.einsum("bij,jb->ib", H, dr)
                denom = np.einsum("ib,ib->b", dz, Hdr)
                ok = active & (np.abs(denom) > 1e-14) & np.isfinite(denom)
                if ok.any():
                    dzH = np.einsum("ib,bij->bj", dz, H)
                    scale_col = np.where(ok, 1.0 / np.where(ok, denom, 1.0), 0.0)
                    upd = np.einsum("ib,bj->bij", (dz - Hdr) * scale_col, dzH)
                    H[ok] += upd[ok]
                still = ~(converged | failed)
                Z[:, active & still] = Z_new[:, active & still]
                R[:, active & still] = np.where(np.isfinite(R_new), R_new, 0.0)[:, active & still]
        elif cfg.method == "newton":
            if jac is None:
                raise ValueError("newton requires a Jacobian callable")
            eye = np.eye(n)
            for k in range(cfg.max_iterations):
                active = ~(converged | failed)
                if not active.any():
                    break
                GZ = g(Z)
                evals[active] += 1
                _check(GZ, Z, k)
                active = ~(converged | failed)
                if not active.any():
                    break
                J = jac(Z)  # (B, n, n)
                dz = np.linalg.solve(J - eye, -(GZ - Z).T[..., None])[..., 0].T
                Z[:, active] = Z[:, active] + dz[:, active]
        else:
            raise ValueError(f"unknown method {cfg.method}")

    return Z, iters, evals, converged, residuals


def linear_fixed_point(apply_op, rhs, cfg: SolverConfig):
    """Solve x = rhs + A x by iteration, for a linear operator with spectral
    radius below one.

    ``apply_op`` and ``rhs`` may be plain arrays or tape NodeRefs; in the
    latter case every iterate is recorded, which keeps the solve
    differentiable. Returns ``(x, SolverResult)`` where the result's solution
    holds the numeric value.
    """
    x = rhs
    resid = np.inf
    for it in range(1, cfg.max_iterations + 1):
        x_new = ad.add(rhs, apply_op(x))
        xv = ad.value_of(x_new)
        if not np.all(np.isfinite(xv)):
            return x_new, SolverResult(xv, it, np.inf, False, it, None, "non-finite iterate")
        resid = float(np.linalg.norm(xv - ad.value_of(x)) / max(1.0, np.linalg.norm(xv)))
        x = x_new
        if resid <= cfg.tolerance:
            return x, SolverResult(xv, it, resid, True, it)
    return x, SolverResult(ad.value_of(x), cfg.max_iterations, resid, False, cfg.max_iterations, None,
                           "max_iterations reached")


def adjoint_linear_solve(jacobian_vector_product, rhs, cfg: SolverConfig):
    """Solve u^T (I - dg/dz) = rhs^T iteratively as u <- rhs + (u^T dg/dz)^T.

    ``jacobian_vector_product(v)`` must return (dg/dz)^T v, i.e. the column
    form of v^T dg/dz. Works on arrays or NodeRefs (then the solve is
    recorded and differentiable). Returns ``(u, SolverResult)``; callers must
    check ``converged``.
    """
    return linear_fixed_point(jacobian_vector_product, rhs, cfg)
