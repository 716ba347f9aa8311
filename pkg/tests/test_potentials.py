import numpy as np
import pytest

from magstrich.grid import inner, l2_norm, laplacian, make_grid, random_field
from magstrich.potentials import (ModelParams, apply_H_array, apply_L_array, build_model,
                                  check_fourier_decay, check_spatial_decay, make_gaussian_model,
                                  model_from_json, zero_model)


@pytest.fixture(scope="module")
def model(g32):
    return make_gaussian_model(1.0, 1.0, 0.5, g32, True, coupling=0.5)


def test_divergence_free(model):
    assert np.abs(model.div_A).max() < 1e-10
    assert np.sqrt(sum(a ** 2 for a in model.A)).max() == pytest.approx(0.5, rel=0.05)


def test_not_divergence_free(g32):
    m = make_gaussian_model(1.0, 0.0, 0.5, g32, False, coupling=1.0)
    assert np.abs(m.div_A).max() > 0.1


def test_width_too_large(g32):
    with pytest.raises(ValueError, match="too large"):
        make_gaussian_model(1.0, 1.0, 2.0, g32)


def test_zero_model(g32, rng):
    z = zero_model(g32)
    assert z.is_zero and not z.has_magnetic
    f = random_field(g32, rng, band=4, envelope=1.0)
    assert np.allclose(apply_H_array(z, f), -laplacian(f, g32))


def test_L_hermitian(model, rng, g32):
    f = random_field(g32, rng, band=5, envelope=1.0)
    h = random_field(g32, rng, band=5, envelope=1.0)
    a = inner(h, apply_L_array(model, f), g32)
    b = inner(apply_L_array(model, h), f, g32)
    assert abs(a - b) < 1e-12 * abs(a)


def test_forms_agree(rng):
    # the forms differ only by aliasing of the products, so resolve them
    g = make_grid(64, 4.0)
    model = make_gaussian_model(1.0, 1.0, 0.5, g, True, coupling=0.5)
    f = random_field(g, rng, band=3, envelope=1.0)
    s = apply_L_array(model, f, "symmetric")
    for form in ("gradient", "divergence"):
        d = l2_norm(apply_L_array(model, f, form) - s, g) / l2_norm(s, g)
        assert d < 1e-7
    with pytest.raises(ValueError):
        apply_L_array(model, f, "bogus")


def test_H_is_minus_laplacian_plus_L(model, rng, g32):
    f = random_field(g32, rng, band=3, envelope=1.0)
    lhs = apply_H_array(model, f)
    rhs = -laplacian(f, g32) + apply_L_array(model, f)
    assert np.allclose(lhs, rhs, atol=1e-11)


def test_decay_checks(model):
    d = check_spatial_decay(model, sigma=4.5)
    assert np.isfinite(d["decay_ratio"]) and d["decay_ratio"] > 0
    f = check_fourier_decay(model)
    assert np.isfinite(f["fourier_ratio"])


def test_serialization_and_regrid(model, g16):
    m2 = model_from_json(model.to_json())
    assert m2.params == model.params
    assert np.allclose(m2.V, model.V)
    m3 = model.regrid(g16)
    assert m3.grid == g16 and m3.params == model.params
    assert model.regrid(model.grid) is model
    assert model.with_coupling(0.0).is_zero


def test_build_rejects_bad_width(g16):
    with pytest.raises(ValueError):
        build_model(ModelParams(1.0, 1.0, 0.0), g16)
