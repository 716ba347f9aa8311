import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from magstrich.grid import (Field, Side, as_array, divergence, fftn, gradient, ifftn, inner,
                            l2_norm, laplacian, make_grid, natural_order, random_field,
                            sobolev_apply, sobolev_array, transform, weight, weighted_norm)


def test_make_grid_validates():
    for bad in (12, 4, 0):
        with pytest.raises(ValueError):
            make_grid(bad, 1.0)
    with pytest.raises(ValueError):
        make_grid(16, -1.0)


def test_geometry(g16):
    assert g16.spacing == pytest.approx(0.5)
    assert g16.frequency_cutoff == pytest.approx(2 * np.pi)
    ax = natural_order(g16.axis())
    assert ax[0] == pytest.approx(-4.0) and ax[-1] == pytest.approx(3.5)
    assert g16.axis()[0] == 0.0


def test_fft_unitary(g16, rng):
    a = rng.standard_normal(g16.shape) + 1j * rng.standard_normal(g16.shape)
    assert np.linalg.norm(fftn(a)) == pytest.approx(np.linalg.norm(a), rel=1e-13)
    assert np.allclose(ifftn(fftn(a)), a, atol=1e-13)


def test_gaussian_derivatives():
    g32 = make_grid(64, 6.0)
    x, y, z = g32.coords()
    r2 = g32.r2()
    f = np.exp(-r2)
    gx = gradient(f, g32)[0]
    assert np.abs(gx - (-2 * x * f)).max() < 1e-10
    assert np.abs(laplacian(f, g32) - (4 * r2 - 6) * f).max() < 1e-9
    # div of (f, 0, 0) is d_x f
    assert np.abs(divergence([f, 0 * f, 0 * f], g32) - gx).max() < 1e-12


def test_gaussian_norm(g32):
    f = np.exp(-g32.r2())
    assert l2_norm(f, g32) == pytest.approx((np.pi / 2) ** 0.75, rel=1e-10)


def test_weight_values(g16):
    w = weight(g16, -2.0)
    assert w[0, 0, 0] == 1.0
    assert w[2, 0, 0] == pytest.approx(1 / (1 + 1.0))


@settings(max_examples=20, deadline=None)
@given(st.floats(-2, 2), st.integers(0, 2 ** 31))
def test_sobolev_inverse(alpha, seed):
    g = make_grid(8, 2.0)
    a = random_field(g, np.random.default_rng(seed))
    b = sobolev_array(sobolev_array(a, g, alpha), g, -alpha)
    assert np.allclose(a, b, atol=1e-12)


def test_sobolev_monotone(g16, rng):
    a = random_field(g16, rng)
    assert l2_norm(sobolev_array(a, g16, 0.5), g16) >= l2_norm(a, g16)


def test_field_roundtrip(g16, rng):
    a = random_field(g16, rng, band=3.0, envelope=1.0)
    f = Field(g16, a)
    fh = transform(f, Side.FREQUENCY)
    assert np.allclose(as_array(fh), a)
    assert fh.norm() == pytest.approx(f.norm())
    assert f.norm() == pytest.approx(1.0)
    s = sobolev_apply(fh, 1.0)
    assert s.side is Side.FREQUENCY
    assert np.allclose(as_array(s), sobolev_array(a, g16, 1.0))
    assert weighted_norm(f, -1.0) < f.norm()
    with pytest.raises(ValueError):
        Field(g16, np.zeros((4, 4, 4)))


def test_inner_linear(g16, rng):
    a, b = random_field(g16, rng), random_field(g16, rng)
    assert inner(a, 2j * b, g16) == pytest.approx(2j * inner(a, b, g16))
    assert inner(a, a, g16).real == pytest.approx(1.0)
