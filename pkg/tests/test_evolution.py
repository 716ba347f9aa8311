import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from magstrich.evolution import (STABILITY_BUDGET, AdmissibilityError, AdmissiblePair,
                                 DriftError, KrylovError, Method, band_probes, bound_states,
                                 characteristic_lambda, continuous_projection, energy,
                                 free_gaussian, krylov_expm, lp_norm, operator_norm_bound,
                                 propagate, smoothing_norm, strichartz_norm, write_series)
from magstrich.grid import inner, l2_norm, make_grid, random_field
from magstrich.potentials import apply_H_array, make_gaussian_model, zero_model


@pytest.fixture(scope="module")
def coupled():
    g = make_grid(16, 4.0)
    return make_gaussian_model(1.0, 1.0, 0.8, g, True, coupling=0.5)


@pytest.fixture(scope="module")
def packet(coupled):
    g = coupled.grid
    f = free_gaussian(g, 1.0, 0.0) * np.exp(1j * g.coords()[0])
    return f / l2_norm(f, g)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-2.0, 2.0))
def test_krylov_matches_expm(seed, t):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((30, 30)) + 1j * rng.standard_normal((30, 30))
    a = (a + a.conj().T) / 4
    v = rng.standard_normal(30) + 0j
    out, dim = krylov_expm(lambda x: a @ x, v, t, max_dim=30)
    ref = sla.expm(1j * t * a) @ v
    assert np.linalg.norm(out - ref) < 1e-10 * np.linalg.norm(v)
    assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(v), rel=1e-13)


def test_krylov_limits():
    a = np.diag(np.arange(50.0))
    with pytest.raises(KrylovError):
        krylov_expm(lambda x: a @ x, np.ones(50) + 0j, 3.0, max_dim=3)
    z, d = krylov_expm(lambda x: a @ x, np.zeros(50, complex), 1.0)
    assert d == 0 and not np.any(z)


def test_free_gaussian_closed_form():
    g = make_grid(64, 10.0)
    f = free_gaussian(g, 1.0, 0.0)
    assert np.allclose(f, np.exp(-g.r2() / 2))
    run = propagate(zero_model(g), f, 0.01, 50, stride=10)
    for t, s in zip(run.times, run.snapshots):
        assert np.abs(s - free_gaussian(g, 1.0, t)).max() < 1e-10
    assert run.total_drift < 1e-12 and run.horizon == pytest.approx(0.5)


@pytest.mark.parametrize("method", list(Method))
def test_unitary_and_energy(method, coupled, packet):
    run = propagate(coupled, packet, 0.01, 10, method=method)
    assert run.total_drift < 1e-12
    assert np.allclose(run.norms, 1.0, atol=1e-12)
    if method is Method.KRYLOV_EXP:
        e0 = energy(coupled, packet)
        assert energy(coupled, run.snapshots[-1]) == pytest.approx(e0, rel=1e-12)
        assert max(run.krylov_dims) <= 20


def test_split_step_second_order(coupled, packet):
    g = coupled.grid
    ref = propagate(coupled, packet, 0.01, 10, method=Method.KRYLOV_EXP).snapshots[-1]
    errs = [l2_norm(propagate(coupled, packet, 0.1 / n, n).snapshots[-1] - ref, g)
            for n in (2, 4)]
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.15)


def test_stability_budget(coupled, packet):
    dt = 2 * STABILITY_BUDGET / operator_norm_bound(coupled)
    with pytest.raises(ValueError, match="stability"):
        propagate(coupled, packet, dt, 1, method=Method.KRYLOV_EXP)


def test_drift_guard(coupled, packet):
    with pytest.raises(DriftError):
        propagate(coupled, packet, 0.01, 3, step_drift=0.0)


def test_admissible_pairs():
    with pytest.raises(AdmissibilityError, match="endpoint q=2 excluded"):
        AdmissiblePair(2, 6)
    with pytest.raises(AdmissibilityError):
        AdmissiblePair(4, 4)
    with pytest.raises(AdmissibilityError):
        AdmissiblePair(np.inf, 1.5)
    assert AdmissiblePair.from_p(2.0).q == np.inf
    assert AdmissiblePair.from_p(3.0).q == pytest.approx(4.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(2.0, 5.99))
def test_from_p_admissible(p):
    pair = AdmissiblePair.from_p(p)
    assert 2 / pair.q + 3 / pair.p == pytest.approx(1.5)
    assert pair.q > 2


def test_lp_norms():
    g = make_grid(32, 4.0)
    f = np.exp(-g.r2())
    assert lp_norm(f, g, 2) == pytest.approx(l2_norm(f, g))
    assert lp_norm(f, g, np.inf) == 1.0
    # int exp(-p r^2) = (pi/p)^(3/2)
    assert lp_norm(f, g, 3) == pytest.approx((np.pi / 3) ** 0.5, rel=1e-8)


def test_characteristic_lambda():
    g = make_grid(32, 8.0)
    f = free_gaussian(g, 1.0, 0.0) * np.exp(2j * g.coords()[0])
    # <-Delta> = 3/(2 s^2) + k0^2 for exp(-r^2/(2 s^2)) e^{i k0 x}
    assert characteristic_lambda(f, g) == pytest.approx(np.sqrt(1.5 + 4), rel=1e-8)


def test_strichartz_energy_norm(tmp_path):
    g = make_grid(32, 10.0)
    f = free_gaussian(g, 1.0, 0.0)
    f = f / l2_norm(f, g)
    run = propagate(zero_model(g), f, 0.01, 40)
    assert strichartz_norm(run, AdmissiblePair(np.inf, 2)) == pytest.approx(1.0, abs=1e-12)
    assert strichartz_norm(run, (4, 3)) > 0
    coarse = propagate(zero_model(g), f, 0.2, 3)
    with pytest.raises(ValueError, match="spacing"):
        strichartz_norm(coarse, AdmissiblePair(4, 3))
    sm = smoothing_norm(run, 4.5)
    assert sm.tail == pytest.approx(sm.integrand[-1] * sm.horizon / 2)
    half = smoothing_norm(run, 4.5, 0.2)
    assert half.horizon == pytest.approx(0.2) and half.value < sm.value
    path = tmp_path / "s.csv"
    write_series(run, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,l2,lp,weighted_h_half" and len(lines) == 42


def test_bound_states_and_projection():
    g = make_grid(16, 4.0)
    m = make_gaussian_model(1.0, -30.0, 0.8, g, True, coupling=0.5)
    bs = bound_states(m, n_max=2)
    assert len(bs.energies) >= 1 and bs.energies[0] < -1
    psi = bs.states[0]
    assert l2_norm(psi, g) == pytest.approx(1.0)
    assert l2_norm(apply_H_array(m, psi) - bs.energies[0] * psi, g) < 1e-8
    f = random_field(g, np.random.default_rng(0), band=3, envelope=1.5)
    p = continuous_projection(m, f, 2)
    assert abs(inner(psi, p, g)) < 1e-12
    assert l2_norm(continuous_projection(m, p, 2) - p, g) < 1e-12
    assert bound_states(zero_model(g)).energies.size == 0


def test_band_probes():
    g = make_grid(16, 4.0)
    a = band_probes(g, 2, 0.5, 3.0, 1.5, seed=4)
    b = band_probes(g, 2, 0.5, 3.0, 1.5, seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert l2_norm(a[0], g) == pytest.approx(1.0)
    assert 0.5 < characteristic_lambda(a[0], g) < 3.0
