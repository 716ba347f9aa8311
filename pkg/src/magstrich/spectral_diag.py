"""Dilation generator, virial identities, exponential weights and an
embedded-eigenvalue scan.

Conventions follow apply_H: H = -Delta + i(A.grad + grad.A) + V.  With this
coefficient the magnetic terms of the weighted and virial identities carry
twice the factor they have for the operator -Delta + (i/2)(A.grad + grad.A) + V:

    H psi_F = E psi_F + [-(grad.gradF + gradF.grad) + |gradF|^2 + 2i A.gradF] psi_F
    <psi,[H,K]psi> = 2E||psi||^2 + <psi,(-2i At.grad - 2V - x.gradV)psi>
                     - i<psi,(2 div A + x.grad div A)psi>,    At = A + x.grad A,

the last line for eigenfunctions.  For the (i/2) operator the magnetic terms
are halved (-i At.grad instead of -2i At.grad).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import CubicSpline
from scipy.sparse.linalg import LinearOperator, gmres

from .grid import GridSpec, as_array, fftn, ifftn, gradient, inner, l2_norm, like
from .potentials import PotentialModel, apply_H_array

log = logging.getLogger(__name__)

MAX_EXPONENT = 30.0


# ------------------------------------------------------------ dilations

def dilation_array(a: np.ndarray, grid: GridSpec) -> np.ndarray:
    """K a = x.grad a + (3/2) a with a spectral gradient."""
    xs = grid.coords()
    ga = gradient(a, grid)
    return sum(xs[j] * ga[j] for j in range(3)) + 1.5 * a


def dilation_apply(f):
    """K = (x.grad + grad.x)/2 on a Field."""
    return like(f, dilation_array(as_array(f), f.grid))


def virial_bracket(m: PotentialModel, psi) -> float:
    """<psi,[H,K]psi> = 2 Re<H psi, K psi>."""
    a = as_array(psi, m.grid)
    return float(2 * inner(apply_H_array(m, a), dilation_array(a, m.grid), m.grid).real)


def grad_norm2(a: np.ndarray, grid: GridSpec) -> float:
    return float(sum(l2_norm(d, grid) ** 2 for d in gradient(a, grid)))


def commutator_expectation(m: PotentialModel, psi) -> complex:
    """<psi,[H,K]psi> from the explicit commutator, valid for any localized psi:
    2||grad psi||^2 + <psi,(2i(A - x.grad A).grad - i x.grad div A - x.grad V)psi>."""
    g = m.grid
    a = as_array(psi, g)
    out = 2 * grad_norm2(a, g) + 0j
    if m.is_zero:
        return out
    xs = g.coords()
    ga = gradient(a, g)
    xgA = [sum(xs[k] * m.grad_A[j][k] for k in range(3)) for j in range(3)]
    mag = sum((m.A[j] - xgA[j]) * ga[j] for j in range(3))
    xgdiv = sum(xs[k] * d for k, d in enumerate(gradient(m.div_A, g))).real
    out += inner(a, 2j * mag - 1j * xgdiv * a - m.x_dot_grad_V() * a, g)
    return complex(out)


def hk2_rhs(m: PotentialModel, psi, E: float) -> complex:
    """Eigenfunction form of the virial bracket (see the module docstring)."""
    g = m.grid
    a = as_array(psi, g)
    out = 2 * E * l2_norm(a, g) ** 2 + 0j
    if m.is_zero:
        return out
    xs = g.coords()
    ga = gradient(a, g)
    At = m.A_tilde()
    xgdiv = sum(xs[k] * d for k, d in enumerate(gradient(m.div_A, g))).real
    out += inner(a, -2j * sum(At[j] * ga[j] for j in range(3))
                 - (2 * m.V + m.x_dot_grad_V()) * a
                 - 1j * (2 * m.div_A + xgdiv) * a, g)
    return complex(out)


# -------------------------------------------------------- weight profiles

def _step(u):
    """C^3 smoothstep on [0, 1] with its first three derivatives."""
    u = np.clip(u, 0.0, 1.0)
    s = u ** 4 * (35 - 84 * u + 70 * u ** 2 - 20 * u ** 3)
    s1 = 140 * u ** 3 * (1 - u) ** 3
    s2 = 420 * u ** 2 * (1 - u) ** 2 * (1 - 2 * u)
    s3 = 840 * u * (1 - u) * (1 - 5 * u + 5 * u ** 2)
    return s, s1, s2, s3


def cutoff(r, start: float = 0.25, end: float = 2.0):
    """chi(r) = 0 for r <= start, 1 for r >= end; returns chi and three derivatives."""
    w = end - start
    s, s1, s2, s3 = _step((np.asarray(r, float) - start) / w)
    return s, s1 / w, s2 / w ** 2, s3 / w ** 3


class ProfileKind(str, Enum):
    FR_BASIC = "FR_basic"
    FR_BOOSTED = "FR_boosted"
    LINEAR = "Linear"


@dataclass(frozen=True)
class WeightProfile:
    """Radial exponent F.

    FR_basic:   F = alpha int_0^r chi(1 - chi(./R))
    FR_boosted: F = alpha r chi(r) + eps_step int_0^r chi(1 - chi(./R))
    Linear:     F = alpha <r>
    """
    alpha: float
    eps_step: float = 0.0
    R: float = 8.0
    kind: ProfileKind = ProfileKind.FR_BASIC
    cutoff_start: float = 0.25
    cutoff_end: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ProfileKind(self.kind))
        if self.alpha < 0 or self.eps_step < 0:
            raise ValueError("alpha and eps_step must be non-negative")
        if not 0 <= self.cutoff_start < self.cutoff_end:
            raise ValueError("need 0 <= cutoff_start < cutoff_end")
        if self.kind is not ProfileKind.LINEAR and not self.R > 1:
            raise ValueError("R must exceed 1")

    # F' .. F''' and g = F'/r, all radial
    def derivatives(self, r):
        r = np.asarray(r, float)
        a, e, R = self.alpha, self.eps_step, self.R
        cw = (self.cutoff_start, self.cutoff_end)
        if self.kind is ProfileKind.LINEAR:
            j = np.sqrt(1 + r ** 2)
            return a * r / j, a / j ** 3, -3 * a * r / j ** 5, a / j
        c0, c1, c2, c3 = cutoff(r, *cw)
        d0, d1, d2, d3 = cutoff(r / R, *cw)
        d1, d2, d3 = d1 / R, d2 / R ** 2, d3 / R ** 3
        # b = chi (1 - chi(r/R)) and its derivatives
        b0 = c0 * (1 - d0)
        b1 = c1 * (1 - d0) - c0 * d1
        b2 = c2 * (1 - d0) - 2 * c1 * d1 - c0 * d2
        coef = a if self.kind is ProfileKind.FR_BASIC else e
        f1, f2, f3 = coef * b0, coef * b1, coef * b2
        if self.kind is ProfileKind.FR_BOOSTED:
            f1 = f1 + a * (c0 + r * c1)
            f2 = f2 + a * (2 * c1 + r * c2)
            f3 = f3 + a * (3 * c2 + r * c3)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(r > 0, f1 / np.where(r > 0, r, 1.0), 0.0)   # chi vanishes near 0
        return f1, f2, f3, g

    def F(self, r) -> np.ndarray:
        r = np.asarray(r, float)
        if self.kind is ProfileKind.LINEAR:
            return self.alpha * np.sqrt(1 + r ** 2)
        # integrate F' on a fine radial table
        rr = np.linspace(0, max(float(np.max(r)), 1e-9), 20001)
        Fr = cumulative_simpson(self.derivatives(rr)[0], x=rr, initial=0.0)
        return CubicSpline(rr, Fr)(r)

    def gradient_bound(self) -> float:
        """Allowed sup|grad F|: alpha + eps_step, with the transition term
        alpha r chi'(r) of the boosted profile added for that kind."""
        b = self.alpha + self.eps_step
        if self.kind is ProfileKind.FR_BOOSTED:
            # max of the smoothstep derivative is 35/16
            b += self.alpha * self.cutoff_end * 35.0 / 16.0 / (self.cutoff_end - self.cutoff_start)
        return b

    def check(self, r_max: float) -> dict:
        r = np.linspace(0, r_max, 20001)
        f1 = self.derivatives(r)[0]
        F = self.F(r)
        ok = bool(np.all(f1 >= -1e-14) and np.all(np.diff(F) >= -1e-12) and F[0] >= 0
                  and np.max(np.abs(f1)) <= self.gradient_bound() * (1 + 1e-12))
        return {"sup_grad": float(np.max(np.abs(f1))), "bound": self.gradient_bound(), "ok": ok}

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "eps_step": self.eps_step, "R": self.R,
                "kind": self.kind.value,
                "cutoff_start": self.cutoff_start, "cutoff_end": self.cutoff_end}


def _radial(grid: GridSpec):
    return np.sqrt(grid.r2())


def periodic_radius(grid: GridSpec):
    """Smooth periodic stand-in for |x| and its gradient.

    r_p^2 = sum_j s_j^2 with s_j = (2L/pi) sin(pi x_j / 2L); r_p = |x| + O(|x|^3)
    near the origin and, unlike the minimal-image radius, has no kink across
    the box seam, so e^F and grad F stay smooth on the torus.
    """
    L = grid.box_half_width
    xs = grid.coords()
    c = 2 * L / np.pi
    sj = [c * np.sin(x / c) for x in xs]
    r = np.sqrt(sum(v ** 2 for v in sj))
    safe = np.where(r > 0, r, 1.0)
    dr = [np.where(r > 0, v * np.cos(x / c) / safe, 0.0) for v, x in zip(sj, xs)]
    return r, dr


def weighted_conjugation_residual(m: PotentialModel, psi, E: float, profile: WeightProfile,
                                  eig_tol: float = 1e-6, interior: float = 0.75) -> dict:
    """Residual of the conjugated eigen-equation for psi_F = e^F psi.

    Returns relative residual ||H psi_F - E psi_F - B psi_F|| / ||psi_F|| with
    B = -(grad.gradF + gradF.grad) + |gradF|^2 + 2i A.gradF, and the relative
    defect of Re<psi_F, H psi_F> = <psi_F, (|gradF|^2 + E) psi_F>.
    F is evaluated at the periodic radius (see periodic_radius).  Both
    residuals are measured on the ball |x| < interior * L.
    """
    g = m.grid
    a = np.array(as_array(psi, g), dtype=complex)
    nrm = l2_norm(a, g)
    if nrm == 0:
        raise ValueError("psi must be nonzero")
    ball = g.r2() < (interior * g.box_half_width) ** 2
    full_res = l2_norm(apply_H_array(m, a) - E * a, g) / nrm
    if full_res > eig_tol:
        raise ValueError(f"(E, psi) is not an eigenpair: residual {full_res:.2e} > {eig_tol:.0e}")
    eig_res = l2_norm(ball * (apply_H_array(m, a) - E * a), g) / nrm
    r, dr = periodic_radius(g)
    F = profile.F(r)
    if F.max() > MAX_EXPONENT:
        raise ValueError(f"weight exponent {F.max():.1f} exceeds the cap {MAX_EXPONENT}")
    f1 = profile.derivatives(r)[0]
    gradF = [f1 * d for d in dr]
    f1sq = sum(c ** 2 for c in gradF)
    pf = np.exp(F) * a
    gp = gradient(pf, g)
    sym = sum(gradient(gradF[j] * pf, g)[j] + gradF[j] * gp[j] for j in range(3))
    B = -sym + f1sq * pf
    if m.has_magnetic:
        B = B + 2j * sum(m.A[j] * gradF[j] for j in range(3)) * pf
    Hpf = apply_H_array(m, pf)
    res = l2_norm(ball * (Hpf - E * pf - B), g) / l2_norm(pf, g)
    lhs = inner(pf, Hpf, g).real
    rhs = inner(pf, (f1sq + E) * pf, g).real
    return {"residual": float(res), "eigen_residual": float(eig_res),
            "energy_identity_defect": float(abs(lhs - rhs) / abs(rhs)),
            "max_exponent": float(F.max())}


@dataclass
class COperator:
    values: np.ndarray      # C(x) on the grid
    sup: float
    bd1_ratio: float        # sup |(r d_r)^2 g| <r> / alpha
    bd2_ratio: float        # sup |(r d_r)|grad F|^2| / alpha^2

    def to_dict(self) -> dict:
        return {"sup": self.sup, "bd1_ratio": self.bd1_ratio, "bd2_ratio": self.bd2_ratio}


def c_operator_eval(profile: WeightProfile, grid: GridSpec, r_max: float | None = None) -> COperator:
    """C = (x.grad)^2 g - x.grad(|grad F|^2) from the radial derivatives of F.

    (r d_r)^2 g = r F''' - F'' + F'/r and r d_r (F')^2 = 2 r F' F''.  The
    bound ratios are taken on a fine radial table out to r_max (default 4R).
    """
    def table(r):
        f1, f2, f3, g = profile.derivatives(r)
        return r * f3 - f2 + g, 2 * r * f1 * f2

    C1, C2 = table(_radial(grid))
    values = C1 - C2
    if r_max is None:
        r_max = 4 * profile.R if profile.kind is not ProfileKind.LINEAR else 50.0
    rr = np.linspace(0, r_max, 40001)
    t1, t2 = table(rr)
    a = profile.alpha
    bd1 = float(np.max(np.abs(t1) * np.sqrt(1 + rr ** 2)) / a) if a > 0 else 0.0
    bd2 = float(np.max(np.abs(t2)) / a ** 2) if a > 0 else 0.0
    return COperator(values, float(np.max(np.abs(values))), bd1, bd2)


# ----------------------------------------------------------- eigen scan

@dataclass
class Candidate:
    energy: float
    residual: float
    virial_defect: float
    outside_fraction: float
    verdict: str
    converged: bool = True

    def to_dict(self) -> dict:
        return {"E": self.energy, "residual": self.residual, "virial_defect": self.virial_defect,
                "outside_fraction": self.outside_fraction, "verdict": self.verdict,
                "converged": self.converged}


@dataclass
class ScanReport:
    window: tuple
    probes: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def passing(self) -> list:
        return [p for p in self.probes if p.verdict == "candidate"]

    def to_dict(self) -> dict:
        return {"window": list(self.window), "n_probes": len(self.probes),
                "n_passing": len(self.passing),
                "probes": [p.to_dict() for p in self.probes], "failures": self.failures}


def shifted_inverse_iteration(m: PotentialModel, shift: float, iters: int = 8, tol: float = 1e-8,
                              seed: int = 0, v0=None, inner_iters: int = 240, rayleigh: bool = True):
    """Inverse iteration with (H - sigma)^-1 applied by GMRES; sigma starts at the
    shift and, with ``rayleigh``, follows the Rayleigh quotient from the third sweep.

    Returns (E, psi, residual) with psi normalized and E its Rayleigh quotient.
    """
    g = m.grid
    N = g.n ** 3
    rng = np.random.default_rng(seed)
    if v0 is None:
        v = (rng.standard_normal(g.shape) + 1j * rng.standard_normal(g.shape)) \
            * np.exp(-g.r2() / (0.25 * g.box_half_width) ** 2)
    else:
        v = np.array(v0, dtype=complex)
    v = v / l2_norm(v, g)
    Hs = LinearOperator((N, N), matvec=lambda u: (apply_H_array(m, u.reshape(g.shape))
                                                  - shift * u.reshape(g.shape)).ravel(),
                        dtype=complex)
    k2 = g.k2()
    # preconditioner: (|xi|^2 + 1)^-1 tames the kinetic part without touching the shift
    M = LinearOperator((N, N), matvec=lambda u: ifftn(fftn(u.reshape(g.shape)) / (k2 + 1)).ravel(),
                       dtype=complex)
    E, res = shift, np.inf
    sigma = float(shift)
    for it in range(iters):
        if rayleigh and it >= 2:
            sigma = E
        op = LinearOperator((N, N), matvec=lambda u, s=sigma: Hs.matvec(u) + (shift - s) * u,
                            dtype=complex)
        x, _ = gmres(op, v.ravel(), rtol=1e-10, restart=60, maxiter=max(1, inner_iters // 60), M=M)
        v = x.reshape(g.shape)
        v = v / l2_norm(v, g)
        Hv = apply_H_array(m, v)
        E = inner(v, Hv, g).real
        res = l2_norm(Hv - E * v, g)
        if res < tol:
            break
    return float(E), v, float(res)


def embedded_eigenvalue_scan(m: PotentialModel, energy_window, n_probes: int = 6,
                             residual_gate: float = 1e-6, defect_gate: float = 1e-3,
                             outside_radius: float | None = None, outside_gate: float = 1e-2,
                             iters: int = 8, seed: int = 0, require_positive: bool = True,
                             require_div_free: bool = True) -> ScanReport:
    """Probe the window for eigenfunctions of the discretized H.

    A probe is a 'candidate' only if its eigen-residual is below the residual
    gate, its virial defect |bracket - hk2_rhs| is below the defect gate
    (relative to 2E||psi||^2), and at most outside_gate of its mass lies
    beyond outside_radius.  Anything else is reported as 'rejected:<gate>'.
    """
    lo, hi = map(float, energy_window)
    if require_positive and not lo > 0:
        raise ValueError("energy window must lie in (0, inf)")
    if require_div_free and not m.is_zero and not m.params.divergence_free:
        raise ValueError("the scan requires a divergence-free model")
    g = m.grid
    if outside_radius is None:
        outside_radius = 0.5 * g.box_half_width
    outside = g.r2() > outside_radius ** 2
    report = ScanReport((lo, hi))
    for k, shift in enumerate(np.linspace(lo, hi, n_probes)):
        try:
            E, psi, res = shifted_inverse_iteration(m, float(shift), iters=iters, seed=seed + k)
        except Exception as exc:      # recorded, scan continues
            report.failures.append({"shift": float(shift), "error": str(exc)})
            continue
        defect = abs(virial_bracket(m, psi) - hk2_rhs(m, psi, E).real) / max(abs(2 * E), 1e-300)
        frac = float(np.sum(np.abs(psi[outside]) ** 2) * g.cell_volume)
        if res > residual_gate:
            verdict = "rejected:residual"
        elif defect > defect_gate:
            verdict = "rejected:virial"
        elif frac > outside_gate:
            verdict = "rejected:localization"
        else:
            verdict = "candidate"
        report.probes.append(Candidate(E, res, float(defect), frac, verdict, res <= residual_gate))
    return report
