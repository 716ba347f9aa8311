import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from magstrich.bs_ops import (FactorKind, FactorOp, LinOp, SolveError, bs_solve,
                              compactness_diagnostic, factor_apply, factor_apply_array,
                              limap_scan, op_norm_estimate, partial_neumann_solve,
                              perturbed_resolvent_apply, weighted_resolvent_op, zero_mode_check)
from magstrich.grid import fftn, ifftn, inner, l2_norm, make_grid, random_field
from magstrich.potentials import apply_L_array, make_gaussian_model, zero_model
from magstrich.resolvent import free_space_resolvent_apply, t_symbol


@pytest.fixture(scope="module")
def m16(g16):
    return make_gaussian_model(1.0, 1.0, 0.5, g16, True, coupling=0.5)


@pytest.fixture(scope="module")
def m32(g32):
    return make_gaussian_model(1.0, 1.0, 0.5, g32, True, coupling=0.5)


def test_factorisation_reproduces_L(rng):
    g = make_grid(64, 4.0)
    m = make_gaussian_model(1.0, 1.0, 0.5, g, True, coupling=0.5)
    f = random_field(g, rng, band=3, envelope=1.0)
    ops = {k: FactorOp(k, m) for k in FactorKind}
    lhs = (factor_apply_array(ops[FactorKind.Y1STAR], factor_apply_array(ops[FactorKind.Z1], f))
           + factor_apply_array(ops[FactorKind.Y2STAR], factor_apply_array(ops[FactorKind.Z2], f)))
    assert l2_norm(lhs - apply_L_array(m, f, "gradient"), g) < 1e-7


@pytest.mark.parametrize("kind", list(FactorKind))
def test_factor_adjoints(kind, m32, g32, rng):
    op = FactorOp(kind, m32)
    f = random_field(g32, rng, band=5, envelope=1.0)
    h = random_field(g32, rng, band=5, envelope=1.0)
    a = inner(h, factor_apply(op, f), g32)
    b = inner(factor_apply(op, h, adjoint=True), f, g32)
    assert abs(a - b) <= 1e-11 * max(abs(a), 1e-12)


def test_z1_inverse(m32, g32, rng):
    f = random_field(g32, rng, band=3, envelope=1.0)
    z1 = factor_apply_array(FactorOp("Z1", m32), f)
    back = factor_apply_array(FactorOp("Z1inv", m32), z1)
    assert np.allclose(back, f, atol=1e-10)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_norm_estimate_is_lower_bound(seed):
    # unitary FFT after a diagonal: norm = max |d|
    g = make_grid(8, 2.0)
    rng = np.random.default_rng(seed)
    d = rng.uniform(0.1, 1.0, g.shape)
    op = LinOp(lambda f: fftn(d * f), lambda f: d * ifftn(f), g)
    est = op_norm_estimate(op, tol=1e-10, max_iter=400, seed=seed)
    assert est.value <= d.max() * (1 + 1e-12)
    assert est.value >= 0.9 * d.max()


def test_norm_estimate_converges():
    g = make_grid(8, 2.0)
    d = np.ones(g.shape)
    d[1, 2, 3] = 3.0
    est = op_norm_estimate(LinOp(lambda f: d * f, lambda f: d * f, g), tol=1e-12, max_iter=200)
    assert est.converged and est.value == pytest.approx(3.0, rel=1e-9)
    zero = op_norm_estimate(LinOp(lambda f: 0 * f, lambda f: 0 * f, g))
    assert zero.value == 0 and zero.converged
    short = op_norm_estimate(LinOp(lambda f: d * f, lambda f: d * f, g), tol=1e-14, max_iter=2)
    assert short.lower_bound_only


def test_bs_solve_zero_model(g16, rng):
    f = random_field(g16, rng)
    u, rep = bs_solve(zero_model(g16), f, 2.0)
    assert np.array_equal(u, f) and rep.converged


def test_perturbed_resolvent_equation(m16, g16, rng):
    lam = 2.0
    f = random_field(g16, rng, band=3, envelope=1.0)
    u = perturbed_resolvent_apply(m16, f, lam)
    # (I + R0 L) u = R0 f
    lhs = u + free_space_resolvent_apply(apply_L_array(m16, u, "divergence"), g16, lam)
    rhs = free_space_resolvent_apply(f, g16, lam)
    assert l2_norm(lhs - rhs, g16) < 1e-6 * l2_norm(rhs, g16)
    u2, rep = perturbed_resolvent_apply(m16, f, lam, extrapolate=True)
    assert rep.converged
    assert l2_norm(u - u2, g16) < 1e-6 * l2_norm(u, g16)
    with pytest.raises(ValueError):
        perturbed_resolvent_apply(m16, f, lam, method="periodic")


def test_bs_solve_stagnation_reported(m16, g16, rng):
    f = random_field(g16, rng)
    with pytest.raises(SolveError) as err:
        bs_solve(m16, f, 2.0, tol=1e-30)
    assert not err.value.report.converged


@pytest.mark.parametrize("order", [0, 1, 2])
def test_partial_neumann_solves(order, m16, g16, rng):
    lam = 2.0
    f = random_field(g16, rng, band=3, envelope=1.0)
    x, rep = partial_neumann_solve(m16, f, lam, m_order=order)
    assert rep.converged and rep.neumann_order == order
    # K x = T^-1 R0 L T x
    tx = ifftn(fftn(x) * t_symbol(g16, lam, -1.0))
    kx = ifftn(fftn(free_space_resolvent_apply(apply_L_array(m16, tx, "divergence"), g16, lam))
               * t_symbol(g16, lam, 1.0))
    assert l2_norm(x + kx - f, g16) < 1e-7


def test_zero_mode(m32):
    assert zero_mode_check(zero_model(m32.grid)).value == 1.0
    s = compactness_diagnostic(m32, k=3)
    assert np.all(np.diff(s) <= 0)
    zm = zero_mode_check(m32).value
    # smallest singular value of I + K lies in [1 - ||K||, 1 + ||K||]
    assert 1 - s[0] - 1e-3 <= zm <= 1 + s[0] + 1e-3


def test_weighted_resolvent_adjoint(g16, rng):
    op = weighted_resolvent_op(g16, 2.0, alpha=0.5)
    f, h = random_field(g16, rng), random_field(g16, rng)
    a = inner(h, op(f), g16)
    b = inner(op.adjoint(h), f, g16)
    assert abs(a - b) < 1e-10 * abs(a)


def test_limap_scan_free_rows():
    rows = limap_scan(None, [2.0, 1.0], alpha=0.0, tol=1e-3)
    assert [r["lambda"] for r in rows] == [1.0, 2.0]
    for r in rows:
        assert r["status"] == "ok"
        assert r["normalized_norm"] == pytest.approx(r["raw_norm"] * np.sqrt(1 + r["lambda"] ** 2))
    with pytest.raises(ValueError):
        limap_scan(None, [1.0], sigma_weight=4.0)
    with pytest.raises(ValueError):
        limap_scan(None, [1.0], alpha=1.5)
