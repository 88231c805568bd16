import numpy as np
import pytest

from pideq_lab import autodiff as ad
from pideq_lab.autodiff import Tape, finite_difference_gradient
from pideq_lab.models import ModelGraph, PideqModel, PideqParams, PinnModel, init_pinn_params, pinn_forward
from pideq_lab.physics import (
    IvpSpec,
    LossWeights,
    VdpConfig,
    boundary_loss,
    physics_loss,
    sample_collocation,
    total_loss,
    vdp_dynamics,
    vdp_ivp,
)
from pideq_lab.rootfind import SolverConfig

from helpers import rel_err


def test_vdp_config_validation():
    with pytest.raises(ValueError):
        VdpConfig(mu=float("nan"))


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lam=-0.1)
    with pytest.raises(ValueError):
        LossWeights(kappa=-1.0)


def test_ivp_validation():
    with pytest.raises(ValueError):
        vdp_ivp(t0=2.0, horizon=2.0)


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

def test_vdp_dynamics_initial_condition_point():
    out = vdp_dynamics(0.0, np.array([0.0, 0.1]), VdpConfig(mu=1.0))
    assert np.allclose(out, np.array([0.1, 0.1]))


def test_vdp_dynamics_origin_equilibrium():
    for t in (0.0, 0.7, 5.0):
        assert np.array_equal(vdp_dynamics(t, np.zeros(2)), np.zeros(2))


def test_vdp_dynamics_unit_point():
    out = vdp_dynamics(0.0, np.array([1.0, 1.0]), VdpConfig(mu=1.0))
    assert np.allclose(out, np.array([1.0, -1.0]))


def test_vdp_dynamics_autonomous():
    y = np.array([0.3, -0.8])
    a = vdp_dynamics(0.0, y)
    b = vdp_dynamics(123.4, y)
    assert np.array_equal(a, b)


def test_vdp_dynamics_batched_matches_pointwise():
    rng = np.random.default_rng(4)
    Y = rng.normal(size=(2, 6))
    batched = vdp_dynamics(np.zeros((1, 6)), Y)
    for j in range(6):
        assert np.allclose(batched[:, j], vdp_dynamics(0.0, Y[:, j]))


def test_vdp_dynamics_recordable_and_differentiable():
    tape = Tape()
    y = tape.input(np.array([0.4, -0.2]))
    out = vdp_dynamics(0.0, y, VdpConfig(mu=1.3))
    assert isinstance(out, ad.NodeRef)
    loss = ad.sq_norm(out)
    g = ad.gradient(tape, loss, [y])[y]
    fd = finite_difference_gradient(
        lambda v: float(np.sum(vdp_dynamics(0.0, v, VdpConfig(mu=1.3)) ** 2)),
        np.array([0.4, -0.2]), h=1e-6)
    assert rel_err(g, fd.reshape(2, 1)) < 1e-7


# ---------------------------------------------------------------------------
# collocation sampling
# ---------------------------------------------------------------------------

def test_sample_collocation_range():
    ivp = vdp_ivp()
    pts = sample_collocation(ivp, 3, rng_seed=0)
    assert pts.shape == (3,)
    assert np.all((pts >= 0.0) & (pts <= 2.0))


def test_sample_collocation_deterministic():
    ivp = vdp_ivp()
    a = sample_collocation(ivp, 50, rng_seed=7)
    b = sample_collocation(ivp, 50, rng_seed=7)
    assert np.array_equal(a, b)
    c = sample_collocation(ivp, 50, rng_seed=8)
    assert not np.array_equal(a, c)


def test_sample_collocation_mean_within_clt_bound():
    ivp = vdp_ivp()
    n = 100_000
    pts = sample_collocation(ivp, n, rng_seed=123)
    # uniform on [0, 2]: sd of the sample mean is (2 / sqrt(12)) / sqrt(n)
    three_sigma = 3.0 * (2.0 / np.sqrt(12.0)) / np.sqrt(n)
    assert abs(pts.mean() - 1.0) < three_sigma


def test_sample_collocation_requires_points():
    with pytest.raises(ValueError):
        sample_collocation(vdp_ivp(), 0, rng_seed=0)


# ---------------------------------------------------------------------------
# boundary loss
# ---------------------------------------------------------------------------

def test_boundary_loss_exact_match_is_zero():
    ivp = vdp_ivp()
    assert boundary_loss(ivp.y0, ivp) == 0.0


def test_boundary_loss_unit_offset():
    ivp = vdp_ivp()
    assert boundary_loss(ivp.y0 + np.array([[1.0], [0.0]]), ivp) == pytest.approx(1.0)


def test_boundary_loss_pythagorean_offset():
    ivp = vdp_ivp()
    assert boundary_loss(ivp.y0 + np.array([[0.3], [0.4]]), ivp) == pytest.approx(0.25)


def test_boundary_loss_dimension_mismatch():
    with pytest.raises(ValueError, match="shape"):
        boundary_loss(np.zeros((3, 1)), vdp_ivp())


# ---------------------------------------------------------------------------
# physics loss
# ---------------------------------------------------------------------------

class StubModel:
    """Fixed outputs/derivatives, for exercising the loss arithmetic."""

    def __init__(self, out_cols, deriv_cols, penalty=None):
        self.out_cols = np.asarray(out_cols, dtype=np.float64)
        self.deriv_cols = np.asarray(deriv_cols, dtype=np.float64)
        self.penalty_value = penalty

    def build_graph(self, tape, ts):
        ts = np.asarray(ts).ravel()
        assert ts.size == self.out_cols.shape[1]
        pen = None if self.penalty_value is None else tape.const(self.penalty_value)
        return ModelGraph(tape.const(self.out_cols), tape.const(self.deriv_cols), pen, {}, {})


def test_physics_loss_zero_for_equilibrium_solution():
    # the constant model y = (0, 0) satisfies the Van der Pol dynamics exactly
    zero_pinn = PinnModel(
        init_pinn_params((4,), seed=0).__class__(
            [(np.zeros((4, 1)), np.zeros((4, 1))), (np.zeros((2, 4)), np.zeros((2, 1)))]),
        seed=0)
    assert physics_loss(zero_pinn, vdp_ivp(), [0.1, 0.5, 1.9]) == 0.0


def test_physics_loss_single_point_unit_residual():
    # output (0,0) has dynamics (0,0); derivative error (1,1) gives 1 + 1 = 2
    model = StubModel(np.zeros((2, 1)), np.ones((2, 1)))
    assert physics_loss(model, vdp_ivp(), [0.5]) == pytest.approx(2.0)


def test_physics_loss_matches_term_by_term_reimplementation():
    rng = np.random.default_rng(9)
    model = PinnModel(init_pinn_params((5,), seed=3), seed=3)
    ivp = vdp_ivp()
    points = rng.uniform(0, 2, 5)
    got = physics_loss(model, ivp, points)

    # independent re-implementation: one point at a time, derivative by its
    # own single-point tape, plain numpy arithmetic for the residual
    total = 0.0
    for t in points:
        tape = Tape()
        t_node = tape.input(float(t))
        out = pinn_forward(model.params, t_node)
        deriv = np.array([
            ad.gradient(tape, ad.rows(out, i, i + 1), [t_node], create_graph=False)[t_node][0, 0]
            for i in range(2)
        ]).reshape(2, 1)
        resid = deriv - vdp_dynamics(float(t), out.value)
        total += float(np.sum(resid ** 2))
    assert got == pytest.approx(total, rel=1e-12)


def test_physics_loss_permutation_invariant():
    model = PinnModel(init_pinn_params((6,), seed=5), seed=5)
    ivp = vdp_ivp()
    pts = np.array([0.2, 0.9, 1.7, 0.4])
    a = physics_loss(model, ivp, pts)
    b = physics_loss(model, ivp, pts[::-1])
    assert a == pytest.approx(b, rel=1e-12)


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------

def test_total_loss_reduces_to_boundary_term():
    model = PinnModel(init_pinn_params((5,), seed=1), seed=1)
    res = total_loss(model, vdp_ivp(), [0.3, 1.2], LossWeights(lam=0.0, kappa=0.0))
    assert res.total == res.j_b
    assert res.penalty == 0.0


def test_total_loss_component_arithmetic():
    # components (0.5, 2.0, 0.3) under weights (0.1, 1.0) combine to 1.0
    ivp = vdp_ivp()
    half = np.sqrt(0.25)  # offsets of (0.5, 0.5) give j_b = 0.5
    out_cols = np.column_stack([ivp.y0.ravel() + half, [0.0, 0.0]])
    deriv_cols = np.column_stack([[0.0, 0.0], [1.0, 1.0]])
    model = StubModel(out_cols, deriv_cols, penalty=0.3)
    res = total_loss(model, ivp, [0.5], LossWeights(lam=0.1, kappa=1.0))
    assert res.j_b == pytest.approx(0.5)
    assert res.j_n == pytest.approx(2.0)
    assert res.penalty == pytest.approx(0.3)
    assert res.total == pytest.approx(0.5 + 0.1 * 2.0 + 1.0 * 0.3)


def test_total_loss_nonnegative_and_consistent():
    from pideq_lab.models import init_pideq_params

    params = init_pideq_params(4, 2, seed=6)
    params.A *= 0.5
    model = PideqModel(params, SolverConfig(tolerance=1e-10, max_iterations=300), seed=6)
    res = total_loss(model, vdp_ivp(), [0.1, 0.9, 1.5], LossWeights(lam=0.1, kappa=1.0))
    assert res.total >= 0.0
    assert res.total == pytest.approx(res.j_b + 0.1 * res.j_n + 1.0 * res.penalty, rel=1e-15)


def test_total_loss_affine_in_lambda():
    model = PinnModel(init_pinn_params((5,), seed=11), seed=11)
    ivp = vdp_ivp()
    pts = [0.4, 1.1, 1.8]
    res1 = total_loss(model, ivp, pts, LossWeights(lam=0.1, kappa=0.0))
    res2 = total_loss(model, ivp, pts, LossWeights(lam=0.2, kappa=0.0))
    assert res2.total - res1.total == pytest.approx(0.1 * res1.j_n, rel=1e-12)
    assert res1.j_n == pytest.approx(res2.j_n, rel=1e-15)


def test_total_loss_gradient_matches_fd_pideq():
    rng = np.random.default_rng(13)
    from pideq_lab.models import init_pideq_params

    base = init_pideq_params(4, 2, seed=13)
    base.A *= 0.5 / np.linalg.norm(base.A, 2)
    base.a = rng.normal(size=(4, 1)) * 0.3
    base.b = rng.normal(size=(4, 1)) * 0.2
    solver = SolverConfig(tolerance=1e-12, max_iterations=500)
    ivp = vdp_ivp()
    pts = rng.uniform(0, 2, 4)
    weights = LossWeights(lam=0.1, kappa=1.0)

    model = PideqModel(base, solver, seed=0)
    res = total_loss(model, ivp, pts, weights)
    grad_map = ad.gradient(res.tape, res.total_node, list(res.param_nodes.values()))
    got = {name: grad_map[node] for name, node in res.param_nodes.items()}

    def raw(which, v):
        fields = {"A": base.A, "a": base.a, "b": base.b, "C": base.C}
        fields[which] = v.reshape(fields[which].shape)
        q = PideqParams(**fields)
        return total_loss(PideqModel(q, solver, seed=0), ivp, pts, weights).total

    for which in ("A", "a", "b", "C"):
        fd = finite_difference_gradient(lambda v: raw(which, v), getattr(base, which), h=1e-6)
        assert rel_err(got[which], fd) < 1e-3, which


def test_total_loss_gradient_matches_fd_pinn():
    model = PinnModel(init_pinn_params((4, 4), seed=17), seed=17)
    ivp = vdp_ivp()
    pts = np.random.default_rng(17).uniform(0, 2, 3)
    weights = LossWeights(lam=0.1, kappa=0.0)
    res = total_loss(model, ivp, pts, weights)
    grad_map = ad.gradient(res.tape, res.total_node, list(res.param_nodes.values()))

    for name, node in res.param_nodes.items():
        base = model.params_dict()[name]

        def raw(v):
            values = dict(model.params_dict())
            values[name] = v.reshape(base.shape)
            return total_loss(model.with_params(values), ivp, pts, weights).total

        fd = finite_difference_gradient(raw, base, h=1e-6)
        assert rel_err(grad_map[node], fd) < 1e-5, name
