import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from magstrich.cones import (Case, ChainKind, antipodal_caps, cap_mass,
                             cap_rule, case_bound, chain_budget_report, classify_chain,
                             classify_xi, cone_resolvent_apply, geodesic, holder_seminorm,
                             icosahedral_points, log_total, make_cap_partition,
                             make_sphere_rule, multiplier_case_check, multiplier_eval,
                             power_norm_scan, power_operator, pv_shell_integral, pv_shell_parts,
                             random_shell_function, shell_bound_terms, two_cone_operator)
from magstrich.grid import inner, l2_norm, make_grid, random_field
from magstrich.potentials import make_gaussian_model, zero_model
from magstrich.resolvent import free_space_resolvent_apply


def full_sphere_multiplier(xi, eps):
    """int_{S^2} (eps - i(1 - omega.xi))^-2 dsigma in closed form."""
    r = np.linalg.norm(xi)
    return 2 * np.pi / (1j * r) * (1 / (eps - 1j - 1j * r) - 1 / (eps - 1j + 1j * r))


@pytest.fixture(scope="module")
def part05():
    return make_cap_partition(0.5)


def test_partition_of_unity(part05):
    rng = np.random.default_rng(0)
    om = rng.standard_normal((500, 3))
    om /= np.linalg.norm(om, axis=1)[:, None]
    assert np.abs(part05.chi_all(om).sum(0) - 1).max() < 1e-12
    # neighbour-restricted chi equals the global normalisation
    i = 7
    assert np.allclose(part05.caps[i].chi(om), part05.chi_all(om)[i])
    assert part05.to_dict()["n_caps"] == len(part05)


@settings(max_examples=40, deadline=None)
@given(st.floats(-1, 1), st.floats(0, 2 * math.pi), st.sampled_from([0.25, 0.5, 1.0]))
def test_partition_local_sum(z, phi, delta):
    """chi_i built from neighbour lists sums to one at any direction."""
    part = make_cap_partition(delta)
    rho = math.sqrt(1 - z * z)
    omega = np.array([rho * math.cos(phi), rho * math.sin(phi), z])
    total = sum(float(part.chi(i, omega)) for i in range(len(part)))
    assert abs(total - 1.0) < 1e-12
    assert np.all(part.chi_all(omega) >= 0)


def test_partition_validation():
    with pytest.raises(ValueError):
        make_cap_partition(0.0)
    with pytest.raises(ValueError):
        make_cap_partition(1.5)
    assert len(make_cap_partition(2.0)) == 1 and make_cap_partition(2.0).caps[0].full


def test_icosahedral_points_unit():
    p = icosahedral_points(3)
    assert p.shape == (92, 3)
    assert np.allclose(np.linalg.norm(p, axis=1), 1)


@pytest.mark.parametrize("deg", [4, 10, 20])
def test_sphere_rule_exact(deg):
    r = make_sphere_rule(deg)
    assert r.weights.sum() == pytest.approx(4 * np.pi)
    # int z^2 = 4 pi / 3
    assert np.sum(r.weights * r.nodes[:, 2] ** 2) == pytest.approx(4 * np.pi / 3)


def test_cap_rule_area():
    r = cap_rule([0, 0, 1], 0.5, 40, 80)
    assert r.weights.sum() == pytest.approx(2 * np.pi * (1 - np.cos(0.5)), rel=1e-10)


def test_geodesic():
    assert geodesic([1, 0, 0], [0, 1, 0]) == pytest.approx(np.pi / 2)
    assert geodesic([0, 0, 1], [0, 0, -1]) == pytest.approx(np.pi)


@pytest.mark.parametrize("xi", [[0.3, 0.2, 0.1], [0, 0, 0.9], [5.0, 1.0, 2.0], [0.7, 0.7, 0.1]])
def test_full_cap_multiplier_closed_form(xi):
    cap = make_cap_partition(2.0).caps[0]
    a = multiplier_eval(np.array(xi), cap, 0.05)
    assert abs(a / full_sphere_multiplier(np.array(xi), 0.05) - 1) < 1e-10


def test_multiplier_at_origin(part05):
    cap = part05.caps[0]
    eps = 1e-3
    assert multiplier_eval([0, 0, 0], cap, eps) == pytest.approx((eps - 1j) ** -2 * cap_mass(cap))


def test_multiplier_slice_vs_direct(part05):
    cap = part05.caps[0]
    c = cap.c
    for xi in (np.array([0.3, 0.2, 0.1]), 3 * c + np.array([0.5, 0, 0]), 1.05 * c):
        a = multiplier_eval(xi, cap, 0.05)
        b = multiplier_eval(xi, cap, 0.05, rule=cap_rule(cap.c, cap.radius, 400, 800))
        assert abs(a - b) < 1e-5 * abs(b)


def test_classify_regions(part05):
    cap = part05.caps[0]
    c = cap.c
    assert classify_xi(0.1 * c, cap) is Case.LOW
    assert classify_xi(0.9 * c, cap) is Case.RESONANT
    assert classify_xi(20 * c, cap) is Case.FAR_ALIGNED
    assert case_bound(Case.FAR_OFF_SHELL, [20, 0, 0], 0.5, 1e-3) == pytest.approx(1 / 400)


def test_multiplier_case_suite(part05):
    rows = multiplier_case_check(part05.caps[0], 0.5, 1e-3, sample_count=20, seed=3)
    assert [r["case"] for r in rows] == [1, 2, 3, 4, 5]
    for r in rows:
        if r["samples"]:
            assert r["max_ratio"] < 50
    for r in rows:
        if r["case"] in (2, 4):
            assert abs(r["slope"] + 2) < 0.4


def test_pv_shell_polynomials():
    lam = 8.0
    s, p = pv_shell_parts(lambda x: np.ones(len(x)), lam)
    assert s == pytest.approx(4 * np.pi * lam ** 2)
    assert p == pytest.approx(-16 * np.pi * lam)
    s, p = pv_shell_parts(lambda x: np.sum(x ** 2, -1) + 0j, lam)
    assert s == pytest.approx(4 * np.pi * lam ** 4)
    assert p == pytest.approx(4 * np.pi * (-8 * lam ** 3 - 8 * lam / 3))
    with pytest.raises(ValueError):
        pv_shell_parts(lambda x: np.ones(len(x)), 0.5)


def test_pv_bound_random():
    rng = np.random.default_rng(5)
    for _ in range(5):
        phi = random_shell_function(rng, 8.0)
        v = pv_shell_integral(phi, 8.0)
        l1, h = shell_bound_terms(phi, 8.0)
        assert abs(v) <= 20 * (l1 + h)


def test_random_shell_function_reproducible():
    a = random_shell_function(np.random.default_rng(1), 8.0)
    b = random_shell_function(np.random.default_rng(1), 8.0)
    x = np.random.default_rng(2).standard_normal((10, 3)) * 8
    assert np.array_equal(a(x), b(x))


def test_holder_seminorm():
    # |x| is 1-Lipschitz, so its alpha-seminorm over |h| <= 1 is sup r^(1-alpha) = 1
    pts = np.array([[1.0, 2.0, 3.0], [0.3, 0.1, 0.0]])
    v = holder_seminorm(lambda x: np.linalg.norm(x, axis=-1), 0.5, pts)
    assert np.allclose(v, 1.0)
    with pytest.raises(ValueError):
        holder_seminorm(lambda x: x[..., 0], 1.0, pts)


def test_cone_sum_recovers_free_resolvent():
    g = make_grid(16, 4.0)
    f = np.exp(-g.r2() / 0.7 ** 2) + 0j
    full = cone_resolvent_apply(f, g, 2.0, make_cap_partition(2.0).caps[0])
    ref = free_space_resolvent_apply(f, g, 2.0)
    assert l2_norm(full - ref, g) < 1e-10 * l2_norm(ref, g)
    P = make_cap_partition(1.0)
    s = sum(cone_resolvent_apply(f, g, 2.0, c) for c in P.caps)
    assert l2_norm(s - full, g) < 1e-9 * l2_norm(full, g)
    with pytest.raises(ValueError):
        cone_resolvent_apply(f, g, 6.0, P.caps[0])


def test_two_cone_adjoint(rng):
    g = make_grid(16, 4.0)
    m = make_gaussian_model(1.0, 0.0, 0.5, g, True)
    c1, c2 = antipodal_caps(0.5)
    op = two_cone_operator(m, c1, c2, 2.0)
    f, h = random_field(g, rng), random_field(g, rng)
    a = inner(h, op(f), g)
    b = inner(op.adjoint(h), f, g)
    assert abs(a - b) < 1e-10 * abs(a)


def test_power_operator_adjoint(rng):
    g = make_grid(16, 4.0)
    m = make_gaussian_model(1.0, 1.0, 0.5, g, True, coupling=0.5)
    for main in (False, True):
        op = power_operator(m, 2.0, 2, main_term=main)
        f = random_field(g, rng, band=3, envelope=1.0)
        h = random_field(g, rng, band=3, envelope=1.0)
        a = inner(h, op(f), g)
        b = inner(op.adjoint(h), f, g)
        assert abs(a - b) < 1e-8 * abs(a)


def test_power_scan_zero_model():
    rows = power_norm_scan(zero_model(make_grid(16, 4.0)), 1, [2.0])
    assert rows[0]["norm"] == 0.0
    with pytest.raises(ValueError):
        power_norm_scan(zero_model(make_grid(16, 4.0)), 0, [2.0])


def test_chain_classification(part05):
    c = part05.centers
    far = int(np.argmin(c @ c[0]))
    assert classify_chain([0, 1], part05).classification is ChainKind.DIRECTED
    assert classify_chain([0, far], part05).classification is ChainKind.UNDIRECTED
    with pytest.raises(IndexError):
        classify_chain([0, len(part05)], part05)


def test_chain_budget_arithmetic():
    rep = chain_budget_report(0.5, 6, c6=2.0, c3=3.0, c5=4.0, target=100.0)
    r = rep["rows"][3]
    m = 4
    assert r["total"] == pytest.approx(0.5 ** -2 * 2.0 ** m * m ** (-m / 16))
    assert r["far"] == pytest.approx(3.0 ** m / (math.factorial(m) * (m ** -0.125) ** m))
    assert math.log(r["total"]) == pytest.approx(log_total(m, 0.5, 2.0))
    assert rep["first_m_below_target"] == 1
    rule = chain_budget_report(lambda k: 1 / (10 * k), 3)
    assert rule["rows"][2]["delta"] == pytest.approx(1 / 30)
    assert rule["first_m_below_target"] is None
