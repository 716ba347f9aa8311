"""Gaussian potential families (A, V), decay validators, and the operators L, H.

Convention: H = -Delta + i(A.grad + grad.A) + V, so that
L = H + Delta = 2i A.grad + i div A + V.  The alternative convention with a
factor 1/2 on the magnetic term maps onto this one by A -> A/2.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .grid import (GridSpec, as_array, divergence, fftn, gradient, ifftn, japanese,
                   like, make_grid)

BOUNDARY_TOL = 1e-8


@dataclass(frozen=True)
class ModelParams:
    amplitude_A: float = 0.0
    amplitude_V: float = 0.0
    width: float = 1.0
    divergence_free: bool = True
    coupling: float = 1.0
    decay_sigma: float = 4.5
    decay_eps: float = 0.5

    def to_dict(self) -> dict:
        return {
            "amplitude_A": self.amplitude_A,
            "amplitude_V": self.amplitude_V,
            "coupling": self.coupling,
            "decay_eps": self.decay_eps,
            "decay_sigma": self.decay_sigma,
            "divergence_free": self.divergence_free,
            "width": self.width,
        }


@dataclass
class PotentialModel:
    grid: GridSpec
    params: ModelParams
    A: list            # three real arrays
    V: np.ndarray
    grad_A: list       # grad_A[j][k] = d_k A_j
    div_A: np.ndarray
    grad_V: list
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def coupling(self) -> float:
        return self.params.coupling

    @property
    def decay_sigma(self) -> float:
        return self.params.decay_sigma

    @property
    def decay_eps(self) -> float:
        return self.params.decay_eps

    @property
    def is_zero(self) -> bool:
        p = self.params
        return p.coupling == 0 or (p.amplitude_A == 0 and p.amplitude_V == 0)

    @property
    def has_magnetic(self) -> bool:
        return self.params.coupling != 0 and self.params.amplitude_A != 0

    def regrid(self, grid: GridSpec) -> "PotentialModel":
        """Same model resampled on another grid."""
        if grid == self.grid:
            return self
        return build_model(self.params, grid)

    def with_coupling(self, coupling: float) -> "PotentialModel":
        p = self.params
        return build_model(ModelParams(p.amplitude_A, p.amplitude_V, p.width, p.divergence_free,
                                       float(coupling), p.decay_sigma, p.decay_eps), self.grid)

    def A_tilde(self) -> list:
        """A_j + x.grad A_j."""
        xs = self.grid.coords()
        return [self.A[j] + sum(xs[k] * self.grad_A[j][k] for k in range(3)) for j in range(3)]

    def x_dot_grad_V(self) -> np.ndarray:
        xs = self.grid.coords()
        return sum(xs[k] * self.grad_V[k] for k in range(3))

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(), "model": self.params.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def model_from_dict(d: dict) -> PotentialModel:
    g = d["grid"]
    return build_model(ModelParams(**d["model"]), make_grid(g["n"], g["box_half_width"]))


def model_from_json(s: str) -> PotentialModel:
    return model_from_dict(json.loads(s))


def _real(a):
    return np.ascontiguousarray(np.real(a))


def build_model(params: ModelParams, grid: GridSpec) -> PotentialModel:
    if not params.width > 0:
        raise ValueError("width must be positive")
    L = grid.box_half_width
    active = params.coupling != 0 and (params.amplitude_A != 0 or params.amplitude_V != 0)
    if active and np.exp(-(L / params.width) ** 2) > BOUNDARY_TOL:
        raise ValueError(
            f"width {params.width} too large for box half-width {L}: "
            f"boundary value {np.exp(-(L / params.width) ** 2):.2e} exceeds {BOUNDARY_TOL}")
    env = np.exp(-grid.r2() / params.width ** 2)
    c = params.coupling
    zero = np.zeros(grid.shape)
    if params.amplitude_A == 0 or c == 0:
        A = [zero, zero, zero]
    elif params.divergence_free:
        # A = curl(0, 0, psi); scaled so that max|A| = amplitude_A
        psi = c * params.amplitude_A * params.width * np.sqrt(np.e / 2.0) * env
        gpsi = gradient(psi, grid)
        A = [_real(gpsi[1]), _real(-gpsi[0]), zero]
    else:
        a = c * params.amplitude_A * env / np.sqrt(3.0)
        A = [a, a.copy(), a.copy()]
    V = c * params.amplitude_V * env if params.amplitude_V != 0 else zero
    grad_A = [[_real(g) for g in gradient(Aj, grid)] for Aj in A]
    div_A = _real(divergence(A, grid))
    grad_V = [_real(g) for g in gradient(V, grid)]
    return PotentialModel(grid, params, A, np.asarray(V, float), grad_A, div_A, grad_V)


def make_gaussian_model(amplitude_A: float, amplitude_V: float, width: float, grid: GridSpec,
                        divergence_free: bool = True, coupling: float = 1.0,
                        decay_sigma: float = 4.5, decay_eps: float = 0.5) -> PotentialModel:
    """Gaussian-envelope potentials exp(-|x|^2/width^2).

    With divergence_free the vector potential is the curl of (0, 0, psi) for a
    Gaussian psi, so div A vanishes identically.
    """
    p = ModelParams(float(amplitude_A), float(amplitude_V), float(width), bool(divergence_free),
                    float(coupling), float(decay_sigma), float(decay_eps))
    return build_model(p, grid)


def zero_model(grid: GridSpec) -> PotentialModel:
    return make_gaussian_model(0.0, 0.0, 1.0, grid, True, coupling=0.0)


# ---------------------------------------------------------------- validators

def check_spatial_decay(m: PotentialModel, sigma: float = 8.0, eps: float | None = None) -> dict:
    """Worst ratios of (<x>|A| + |DA| + |V|) to <x>^(-sigma-eps) and of |grad V|
    to <x>^(-1-eps), over the grid."""
    if eps is None:
        eps = m.decay_eps
    r2 = m.grid.r2()
    absA = np.sqrt(sum(a ** 2 for a in m.A))
    absDA = np.sqrt(sum(m.grad_A[j][k] ** 2 for j in range(3) for k in range(3)))
    lhs = japanese(r2, 1.0) * absA + absDA + np.abs(m.V)
    gV = np.sqrt(sum(g ** 2 for g in m.grad_V))
    return {
        "decay_ratio": float(np.max(lhs * japanese(r2, sigma + eps))),
        "grad_V_ratio": float(np.max(gV * japanese(r2, 1.0 + eps))),
        "sigma": float(sigma),
        "eps": float(eps),
    }


def check_fourier_decay(m: PotentialModel, eps: float | None = None) -> dict:
    """sup of sum_{|a|<=2} |D^a A-hat(xi)| against <xi>^(-3-eps).

    Frequency derivatives come from multiplying by (-i x)^a before transforming;
    A-hat uses the continuum normalisation h^3 sum A(x) exp(-i x.xi).
    """
    if eps is None:
        eps = m.decay_eps
    g = m.grid
    xs = g.coords()
    scale = g.cell_volume * g.n ** 1.5
    monomials = [()] + [(k,) for k in range(3)] + [(k, l) for k in range(3) for l in range(k, 3)]
    total = np.zeros(g.shape)
    for Aj in m.A:
        if not np.any(Aj):
            continue
        for mono in monomials:
            prod = Aj.astype(complex)
            for k in mono:
                prod = prod * (-1j * xs[k])
            total += np.abs(fftn(prod)) * scale
    ratio = total * japanese(g.k2(), 3.0 + eps)
    return {"fourier_ratio": float(np.max(ratio)), "eps": float(eps)}


# ---------------------------------------------------------------- operators

def apply_L_array(m: PotentialModel, f: np.ndarray, form: str = "symmetric") -> np.ndarray:
    """L f on a position-side array.

    form="symmetric":  i(A.grad f + div(A f)) + V f   (hermitian on the grid)
    form="gradient":   2i A.grad f + i (div A) f + V f
    form="divergence": 2i div(A f) - i (div A) f + V f  (no derivative of f itself,
                       safe for fields that are not periodic across the box seam)
    All three agree for resolved smooth fields.
    """
    g = m.grid
    out = m.V * f
    if not m.has_magnetic:
        return out
    if form in ("symmetric", "gradient"):
        gf = gradient(f, g)
        adg = sum(m.A[j] * gf[j] for j in range(3))
    if form in ("symmetric", "divergence"):
        dAf = divergence([m.A[j] * f for j in range(3)], g)
    if form == "symmetric":
        return out + 1j * (adg + dAf)
    if form == "gradient":
        return out + 2j * adg + 1j * m.div_A * f
    if form == "divergence":
        return out + 2j * dAf - 1j * m.div_A * f
    raise ValueError(f"unknown form {form!r}")


def apply_H_array(m: PotentialModel, f: np.ndarray, form: str = "symmetric") -> np.ndarray:
    g = m.grid
    fh = fftn(f)
    out = ifftn(g.k2() * fh)
    if m.is_zero:
        return out
    out += m.V * f
    if m.has_magnetic:
        gf = [ifftn(1j * k * fh) for k in g.freqs()]
        if form == "gradient":
            out += 2j * sum(m.A[j] * gf[j] for j in range(3)) + 1j * m.div_A * f
        else:
            out += 1j * (sum(m.A[j] * gf[j] for j in range(3))
                         + divergence([m.A[j] * f for j in range(3)], g))
    return out


def apply_L(m: PotentialModel, f, form: str = "symmetric"):
    return like(f, apply_L_array(m, as_array(f, m.grid), form))


def apply_H(m: PotentialModel, f, form: str = "symmetric"):
    return like(f, apply_H_array(m, as_array(f, m.grid), form))
