"""Free resolvent R0(z) = (H0 - z)^(-1), its boundary values, G = R0(0),
B_lambda, and the auxiliary multipliers T_lambda, S_lambda.

Two realisations of R0 are provided.

* ``periodic``: the exact inverse of the spectral Laplacian on the torus,
  multiplier 1/(|xi|^2 - lambda^2 -/+ i eps).  It needs eps > 0 and sees the
  periodic images of the source.
* ``free_space``: the whole-space convolution with exp(i kappa|x|)/(4 pi |x|),
  kappa^2 = z, Im kappa >= 0, evaluated on the box without periodic images.
  The kernel is truncated at a radius D exceeding the box diameter, which does
  not change the result on the box, and the truncated kernel has the entire
  Fourier transform

      G_D(s) = [1 - e^{i kappa D}(cos sD - i kappa sin(sD)/s)] / (s^2 - kappa^2),

  so eps = 0 is admissible and the result is analytic in kappa.  The real-space
  kernel is tabulated once per (grid, kappa) from a 3n-point lattice and
  applied as a zero-padded 2n-point FFT convolution.

Sign of the algebra identity.  With R0 = (H0 - z)^(-1) and z = lambda^2 + i eps,
the symbol expansion (1 + s/lambda^2)/(s - z) = (1 + z/lambda^2)/(s - z) + 1/lambda^2
gives  <grad/lambda>^2 R0(z) = (2 + i eps/lambda^2) R0(z) + lambda^(-2) I,
which at eps -> 0 reads <grad/lambda>^2 R0 = 2 R0 + lambda^(-2) I  (plus sign).
"""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.fft as sfft

from . import grid as _grid
from .grid import (Field, GridSpec, as_array, fftn, ifftn, like,
                   make_grid, weight)

log = logging.getLogger(__name__)


class Branch(str, Enum):
    PLUS = "+"
    MINUS = "-"


def _branch(b) -> Branch:
    if isinstance(b, Branch):
        return b
    return {"+": Branch.PLUS, "plus": Branch.PLUS, "Plus": Branch.PLUS,
            "-": Branch.MINUS, "minus": Branch.MINUS, "Minus": Branch.MINUS}[b]


def conj_branch(b) -> Branch:
    return Branch.MINUS if _branch(b) is Branch.PLUS else Branch.PLUS


@dataclass(frozen=True)
class SpectralParam:
    lam: float
    epsilon: float
    branch: Branch = Branch.PLUS

    def __post_init__(self):
        object.__setattr__(self, "branch", _branch(self.branch))
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    @property
    def z(self) -> complex:
        s = 1.0 if self.branch is Branch.PLUS else -1.0
        return self.lam ** 2 + 1j * s * self.epsilon


def kappa_of(lam: float, eps: float = 0.0, branch=Branch.PLUS) -> complex:
    """Wavenumber with kappa^2 = lambda^2 +/- i eps and Im kappa >= 0."""
    branch = _branch(branch)
    s = 1.0 if branch is Branch.PLUS else -1.0
    if eps == 0:
        return complex(s * lam)
    k = np.sqrt(complex(lam ** 2, s * eps))
    if k.imag < 0:
        k = -k
    return complex(k)


def kappa_of_energy(E: float, eps: float = 0.0, branch=Branch.PLUS) -> complex:
    """kappa for the complex energy E +/- i eps (E may be negative)."""
    branch = _branch(branch)
    if E >= 0:
        return kappa_of(np.sqrt(E), eps, branch)
    s = 1.0 if branch is Branch.PLUS else -1.0
    k = np.sqrt(complex(E, s * eps))
    return complex(-k if k.imag < 0 else k)


# ------------------------------------------------------------ periodic form

def periodic_symbol(grid: GridSpec, p: SpectralParam) -> np.ndarray:
    if not p.epsilon > 0:
        raise ValueError("epsilon = 0 is rejected; use limiting_absorption for boundary values")
    return 1.0 / (grid.k2() - p.z)


def free_resolvent_apply(f, p: SpectralParam, grid: GridSpec | None = None):
    """Torus resolvent: frequency multiply by 1/(|xi|^2 - lambda^2 -/+ i eps)."""
    if isinstance(f, Field):
        grid = f.grid
        side = f.side
        vals = f.values if side.value == "frequency" else fftn(f.values)
        out = vals * periodic_symbol(grid, p)
        if side.value == "frequency":
            return Field(grid, out, side)
        return Field(grid, ifftn(out), side)
    return ifftn(fftn(f) * periodic_symbol(grid, p))


# ---------------------------------------------------------- free-space form

def truncated_green_symbol(s: np.ndarray, kappa: complex, D: float) -> np.ndarray:
    """Fourier transform of exp(i kappa |x|)/(4 pi |x|) restricted to |x| < D,
    as a function of s = |xi|."""
    s = np.asarray(s, dtype=float)
    kappa = complex(kappa)
    sinc = D * np.sinc(s * D / np.pi)                      # sin(sD)/s
    if kappa == 0:
        half = np.sin(0.5 * s * D)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = 2.0 * half ** 2 / s ** 2
        out = np.where(s == 0, 0.5 * D * D, out)
        return out.astype(complex)
    eikd = np.exp(1j * kappa * D)
    num = 1.0 - eikd * (np.cos(s * D) - 1j * kappa * sinc)
    den = s * s - kappa * kappa
    bad = np.abs(s - kappa) * D < 1e-2
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / den
    if np.any(bad):
        out[bad] = _symbol_by_quadrature(s[bad], kappa, D)
    return out


def _symbol_by_quadrature(s, kappa, D):
    n = int(max(64, 8 * abs(kappa) * D))
    t, wq = np.polynomial.legendre.leggauss(n)
    r = 0.5 * D * (t + 1.0)
    wq = 0.5 * D * wq
    sr = np.outer(s, r)
    integrand = np.exp(1j * kappa * r)[None, :] * r[None, :] * np.sinc(sr / np.pi)
    return integrand @ wq


class FreeSpaceKernel:
    """Tabulated whole-space Green kernel for one grid and one kappa."""

    def __init__(self, grid: GridSpec, kappa: complex, radius_factor: float = 1.02):
        self.grid = grid
        self.kappa = complex(kappa)
        n, L, h = grid.n, grid.box_half_width, grid.spacing
        self.D = 2.0 * np.sqrt(3.0) * L * radius_factor
        M = 3 * n
        half = M // 2
        dxi = 2.0 * np.pi / (M * h)
        q = dxi * np.arange(half + 1)
        s = np.sqrt(q[:, None, None] ** 2 + q[None, :, None] ** 2 + q[None, None, :] ** 2)
        ghat = truncated_green_symbol(s, self.kappa, self.D)
        del s
        # inverse DFT of an even sequence of length M via DCT-I on the half lattice
        g = sfft.dctn(ghat, type=1, workers=_grid.FFT_WORKERS) / (M * h) ** 3
        del ghat
        off = np.abs(np.fft.fftfreq(2 * n, d=1.0 / (2 * n))).astype(int)
        kern = g[np.ix_(off, off, off)]
        del g
        self.hat = sfft.fftn(kern, workers=_grid.FFT_WORKERS) * h ** 3
        self.n = n

    def apply(self, f: np.ndarray) -> np.ndarray:
        n = self.n
        pad = np.zeros((2 * n,) * 3, dtype=complex)
        pad[:n, :n, :n] = np.fft.fftshift(f)
        out = sfft.ifftn(sfft.fftn(pad, workers=_grid.FFT_WORKERS) * self.hat, workers=_grid.FFT_WORKERS)
        return np.fft.ifftshift(out[:n, :n, :n])


_KERNELS: "OrderedDict[tuple, FreeSpaceKernel]" = OrderedDict()
KERNEL_CACHE_BYTES = 1.2e9


def free_space_kernel(grid: GridSpec, kappa: complex) -> FreeSpaceKernel:
    key = (grid.n, grid.box_half_width, round(kappa.real, 12), round(kappa.imag, 12))
    k = _KERNELS.get(key)
    if k is not None:
        _KERNELS.move_to_end(key)
        return k
    k = FreeSpaceKernel(grid, kappa)
    _KERNELS[key] = k
    total = sum(v.hat.nbytes for v in _KERNELS.values())
    while total > KERNEL_CACHE_BYTES and len(_KERNELS) > 1:
        _, old = _KERNELS.popitem(last=False)
        total -= old.hat.nbytes
    return k


def clear_kernel_cache():
    _KERNELS.clear()


def free_space_resolvent_apply(f, grid: GridSpec, lam: float, eps: float = 0.0,
                               branch=Branch.PLUS, kappa: complex | None = None):
    """Whole-space R0(lambda^2 +/- i eps) f for f supported in the box; eps = 0 allowed."""
    if kappa is None:
        kappa = kappa_of(lam, eps, branch)
    a = as_array(f, grid)
    return like(f, free_space_kernel(grid, kappa).apply(a))


def zero_energy_apply(f, grid: GridSpec):
    """G = R0(0): convolution with 1/(4 pi |x|)."""
    return free_space_resolvent_apply(f, grid, 0.0, kappa=0j)


def resolvent_apply(f: np.ndarray, grid: GridSpec, lam: float, eps: float, branch,
                    method: str = "free_space") -> np.ndarray:
    if method == "free_space":
        return free_space_resolvent_apply(f, grid, lam, eps, branch)
    if method == "periodic":
        return free_resolvent_apply(f, SpectralParam(lam, eps, branch), grid)
    raise ValueError(f"unknown resolvent method {method!r}")


# ------------------------------------------------------ limiting absorption

@dataclass
class ExtrapolationReport:
    lam: float
    branch: str
    method: str
    epsilons: list
    level_norms: list
    differences: list
    extrapolated_norm: float
    error_estimate: float
    tol: float
    converged: bool

    def to_dict(self) -> dict:
        return {
            "branch": self.branch,
            "converged": self.converged,
            "differences": [float(x) for x in self.differences],
            "epsilons": [float(x) for x in self.epsilons],
            "error_estimate": float(self.error_estimate),
            "extrapolated_norm": float(self.extrapolated_norm),
            "lambda": float(self.lam),
            "level_norms": [float(x) for x in self.level_norms],
            "method": self.method,
            "tol": float(self.tol),
        }


class ExtrapolationError(RuntimeError):
    def __init__(self, msg, report: ExtrapolationReport):
        super().__init__(msg)
        self.report = report


def extrapolate_to_zero(fn, lam: float, branch, grid: GridSpec, tol: float,
                        eps0: float | None = None, levels: int = 7, method: str = "free_space",
                        post=None):
    """Evaluate fn(eps) on eps0 * 2^-k and extrapolate to eps = 0.

    Extrapolation is polynomial (Neville) in t = kappa(eps) - kappa(0), the
    variable in which the free-space resolvent is analytic; for lambda > 0 this
    is ordinary Richardson extrapolation in eps.  Returns (array, report).
    """
    branch = _branch(branch)
    if eps0 is None:
        eps0 = max(lam, 1.0) / 8.0
    eps_list = [eps0 / 2 ** k for k in range(levels)]
    k0 = kappa_of(lam, 0.0, branch)
    h3 = grid.cell_volume

    def nrm(a):
        return float(np.sqrt(np.vdot(a, a).real * h3))

    ts, table, norms, diffs = [], [], [], []
    best, err = None, np.inf
    for k, eps in enumerate(eps_list):
        u = fn(eps)
        if post is not None:
            u = post(u)
        norms.append(nrm(u))
        ts.append(kappa_of(lam, eps, branch) - k0)
        row = [u]
        for j in range(1, k + 1):
            tj, tk = ts[k - j], ts[k]
            row.append((tk * table[k - 1][j - 1] - tj * row[j - 1]) / (tk - tj))
        table.append(row)
        if k >= 1:
            rel = nrm(row[-1] - table[k - 1][-1]) / max(nrm(row[-1]), 1e-300)
            diffs.append(rel)
            if rel < err:
                best, err = row[-1], rel
        if k >= 2:
            table[k - 2] = None
    if best is None:
        best, err = table[-1][-1], np.inf
    rep = ExtrapolationReport(lam, branch.value, method, eps_list, norms, diffs, nrm(best),
                              err, tol, bool(err <= tol))
    return best, rep


def limiting_absorption(f, lam: float, branch=Branch.PLUS, tol: float = 1e-6,
                        grid: GridSpec | None = None, sigma: float | None = None,
                        method: str = "free_space", eps0: float | None = None,
                        levels: int = 7):
    """Boundary value R0(lambda^2 +/- i0) f by extrapolation over eps0 * 2^-k.

    With ``sigma`` the weighted quantity w R0 (w f), w = <x>^-sigma, is
    extrapolated.  Fails with ExtrapolationError (carrying the report) when the
    estimated error exceeds tol.
    """
    if isinstance(f, Field):
        grid = f.grid
    branch = _branch(branch)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    a = as_array(f, grid)
    w = weight(grid, -sigma) if sigma is not None else None
    src = a * w if w is not None else a
    if not np.any(src):
        if eps0 is None:
            eps0 = max(lam, 1.0) / 8.0
        eps_list = [eps0 / 2 ** k for k in range(levels)]
        rep = ExtrapolationReport(lam, branch.value, method, eps_list, [0.0] * levels, [0.0],
                                  0.0, 0.0, tol, True)
        return like(f, np.zeros(a.shape, dtype=complex)), rep
    best, rep = extrapolate_to_zero(
        lambda eps: resolvent_apply(src, grid, lam, eps, branch, method),
        lam, branch, grid, tol, eps0, levels, method,
        post=(lambda u: u * w) if w is not None else None)
    if not rep.converged:
        raise ExtrapolationError(
            f"limiting absorption did not converge at lambda={lam}: "
            f"error estimate {rep.error_estimate:.3e} > tol {tol:.1e}", rep)
    return like(f, best), rep


# -------------------------------------------------------- derived operators

def b_lambda_apply(f, lam: float, epsilon: float = 0.0, grid: GridSpec | None = None,
                   method: str = "free_space", branch=Branch.PLUS):
    """B_lambda = R0(lambda^2 + i eps) - G (G taken at the same eps for the torus form)."""
    if isinstance(f, Field):
        grid = f.grid
    a = as_array(f, grid)
    if lam == 0:
        return like(f, np.zeros_like(a, dtype=complex))
    if method == "periodic":
        u = (free_resolvent_apply(a, SpectralParam(lam, epsilon, branch), grid)
             - free_resolvent_apply(a, SpectralParam(0.0, epsilon, branch), grid))
    else:
        u = (free_space_resolvent_apply(a, grid, lam, epsilon, branch)
             - zero_energy_apply(a, grid))
    return like(f, u)


def t_symbol(grid: GridSpec, lam: float, power: float = -1.0) -> np.ndarray:
    return (1.0 + grid.k2() / lam ** 2) ** (0.5 * power)


def t_lambda_apply(f, lam: float, invert: bool = False, grid: GridSpec | None = None):
    """T_lambda: multiply by <xi/lambda>^-1 (or <xi/lambda> when invert)."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if isinstance(f, Field):
        grid = f.grid
    a = as_array(f, grid)
    return like(f, ifftn(fftn(a) * t_symbol(grid, lam, 1.0 if invert else -1.0)))


def s_lambda_apply(f, lam: float, epsilon: float, grid: GridSpec | None = None,
                   method: str = "periodic", branch=Branch.PLUS):
    """S_lambda = T_lambda^-1 R0(lambda^2 + i eps)."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if isinstance(f, Field):
        grid = f.grid
    a = as_array(f, grid)
    if method == "periodic":
        p = SpectralParam(lam, epsilon, branch)
        return like(f, ifftn(fftn(a) * t_symbol(grid, lam, 1.0) * periodic_symbol(grid, p)))
    u = free_space_resolvent_apply(a, grid, lam, epsilon, branch)
    return like(f, ifftn(fftn(u) * t_symbol(grid, lam, 1.0)))


def algebra_identity_residual(lam: float, epsilon: float, grid: GridSpec | None = None,
                              sign: float = 1.0) -> float:
    """max over the lattice of | <xi/lambda>^2 r - (2 + i eps/lambda^2) r - sign/lambda^2 |,
    r = 1/(|xi|^2 - lambda^2 - i eps).  sign=+1 is the correct identity."""
    if grid is None:
        grid = make_grid(32, 8.0)
    s = grid.k2()
    r = 1.0 / (s - (lam ** 2 + 1j * epsilon))
    lhs = (1.0 + s / lam ** 2) * r
    rhs = (2.0 + 1j * epsilon / lam ** 2) * r + sign / lam ** 2
    return float(np.max(np.abs(lhs - rhs)))


def grid_for_lambda(lam: float, box_half_width: float, k_ratio: float = 1.5,
                    n_min: int = 32, n_max: int = 256, h_max: float | None = None) -> GridSpec:
    """Smallest power-of-two grid on the box whose cutoff pi/h is >= k_ratio * lambda
    and whose spacing is at most h_max (the resolution a potential needs)."""
    n = n_min
    while n < n_max and (np.pi * n / (2.0 * box_half_width) < k_ratio * lam
                         or (h_max is not None and 2.0 * box_half_width / n > h_max * (1 + 1e-12))):
        n *= 2
    return make_grid(n, box_half_width)
