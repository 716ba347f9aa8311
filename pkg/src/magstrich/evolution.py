"""Unitary propagation of exp(itH), bound-state projection and the
Strichartz / Kato smoothing harnesses.

Sign convention: psi(t) = exp(itH) psi0, so the free flow multiplies the
Fourier transform by exp(it|xi|^2).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import eigh_tridiagonal
from scipy.sparse.linalg import LinearOperator, cg, eigsh

from .grid import (GridSpec, as_array, fftn, ifftn, inner, l2_norm, like,
                   sobolev_array, weight)
from .potentials import PotentialModel, apply_H_array, apply_L_array
from .resolvent import Branch, free_space_kernel, kappa_of_energy

log = logging.getLogger(__name__)

# dt * ||operator|| allowed per Krylov exponential; with dimension 20 the
# Lanczos error bound is then below 1e-12
STABILITY_BUDGET = 4.0
STEP_DRIFT = 1e-10
TOTAL_DRIFT = 1e-8


class Method(str, Enum):
    SPLIT_STEP = "SplitStep"
    KRYLOV_EXP = "KrylovExp"


class DriftError(RuntimeError):
    def __init__(self, msg, step):
        super().__init__(msg)
        self.step = step


class KrylovError(RuntimeError):
    pass


class AdmissibilityError(ValueError):
    pass


# ------------------------------------------------------------------ Krylov

def krylov_expm(apply, v: np.ndarray, t: float, max_dim: int = 20, tol: float = 1e-13):
    """exp(i t A) v for hermitian A by Lanczos with full reorthogonalization.

    Returns (result, dimension).  The small exponential is taken through the
    eigendecomposition of the tridiagonal matrix, so the coefficient vector is
    exactly unit length and the result keeps the norm of v to round-off.
    """
    beta0 = np.sqrt(np.vdot(v, v).real)
    if beta0 == 0:
        return np.zeros_like(v), 0
    basis = [v / beta0]
    alpha, beta = [], []
    for j in range(max_dim):
        w = apply(basis[j])
        a = np.vdot(basis[j], w).real
        alpha.append(a)
        w = w - a * basis[j]
        if j > 0:
            w = w - beta[j - 1] * basis[j - 1]
        for b in basis:
            w = w - np.vdot(b, w) * b
        bnext = np.sqrt(np.vdot(w, w).real)
        theta, Q = eigh_tridiagonal(np.array(alpha), np.array(beta)) if j > 0 else \
            (np.array(alpha), np.ones((1, 1)))
        y = Q @ (np.exp(1j * t * theta) * Q[0].conj())
        if bnext * abs(y[-1]) <= tol or bnext <= tol * abs(a) + 1e-300:
            return beta0 * sum(c * b for c, b in zip(y, basis)), j + 1
        beta.append(bnext)
        basis.append(w / bnext)
    raise KrylovError(f"Krylov exponential not converged in dimension {max_dim}")


def operator_norm_bound(m: PotentialModel, kinetic: bool = True) -> float:
    """Crude upper bound of ||H|| (or of ||L|| with kinetic=False) on the grid."""
    g = m.grid
    kmax = g.frequency_cutoff
    out = 3 * kmax ** 2 if kinetic else 0.0
    if not m.is_zero:
        amax = float(np.max(np.sqrt(sum(a ** 2 for a in m.A))))
        out += 2 * np.sqrt(3) * kmax * amax + float(np.max(np.abs(m.div_A))) \
            + float(np.max(np.abs(m.V)))
    return out


# ------------------------------------------------------------ propagation

@dataclass
class EvolutionRun:
    model: PotentialModel
    psi0: np.ndarray
    dt: float
    n_steps: int
    stride: int
    method: Method
    times: np.ndarray
    snapshots: list
    norms: np.ndarray
    max_step_drift: float = 0.0
    total_drift: float = 0.0
    krylov_dims: list = field(default_factory=list)

    @property
    def grid(self) -> GridSpec:
        return self.model.grid

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def to_dict(self) -> dict:
        return {"dt": self.dt, "n_steps": self.n_steps, "stride": self.stride,
                "method": self.method.value, "horizon": self.horizon,
                "max_step_drift": self.max_step_drift, "total_drift": self.total_drift}


def propagate(m: PotentialModel, psi0, dt: float, n_steps: int, method=Method.SPLIT_STEP,
              stride: int = 1, max_dim: int = 20, step_drift: float = STEP_DRIFT,
              total_drift: float = TOTAL_DRIFT) -> EvolutionRun:
    """psi(t) = exp(itH) psi0 at t = k dt, stored every `stride` steps."""
    method = Method(method)
    g = m.grid
    psi = np.array(as_array(psi0, g), dtype=complex)
    if dt <= 0 or n_steps < 0 or stride < 1:
        raise ValueError("need dt > 0, n_steps >= 0, stride >= 1")
    k2 = g.k2()
    free = m.is_zero
    if method is Method.KRYLOV_EXP and not free:
        budget = dt * operator_norm_bound(m)
    elif not free:
        budget = dt * operator_norm_bound(m, kinetic=False)
    else:
        budget = 0.0
    if budget > STABILITY_BUDGET:
        raise ValueError(f"dt*||H|| = {budget:.3g} exceeds the stability budget "
                         f"{STABILITY_BUDGET} for {method.value}")

    def H(u):
        return apply_H_array(m, u)

    def P(u):
        return apply_L_array(m, u, "symmetric")

    n0 = np.sqrt(np.vdot(psi, psi).real)
    scale = n0 if n0 > 0 else 1.0
    times, snaps, norms, dims = [0.0], [psi.copy()], [n0], []
    full = np.exp(1j * dt * k2)
    half = np.exp(0.5j * dt * k2)
    hat = fftn(psi) if free else None
    prev, worst = n0, 0.0
    for step in range(1, n_steps + 1):
        if free:
            hat = hat * full
            cur = np.sqrt(np.vdot(hat, hat).real)
        else:
            if method is Method.SPLIT_STEP:
                psi = ifftn(half * fftn(psi))
                psi, d = krylov_expm(P, psi, dt, max_dim)
                psi = ifftn(half * fftn(psi))
            else:
                psi, d = krylov_expm(H, psi, dt, max_dim)
            dims.append(d)
            cur = np.sqrt(np.vdot(psi, psi).real)
        drift = abs(cur - prev) / scale
        worst = max(worst, drift)
        if drift > step_drift:
            raise DriftError(f"norm drift {drift:.2e} at step {step}", step)
        if abs(cur - n0) / scale > total_drift:
            raise DriftError(f"total norm drift {abs(cur - n0) / scale:.2e} at step {step}", step)
        prev = cur
        if step % stride == 0 or step == n_steps:
            if free:
                psi = ifftn(hat)
            times.append(step * dt)
            snaps.append(psi.copy())
            norms.append(cur)
    return EvolutionRun(m, np.array(as_array(psi0, g), dtype=complex), float(dt), int(n_steps),
                        int(stride), method, np.array(times), snaps, np.array(norms) * np.sqrt(g.cell_volume),
                        worst, abs(prev - n0) / scale, dims)


def free_gaussian(grid: GridSpec, s: float, t: float) -> np.ndarray:
    """exp(it(-Delta)) applied to exp(-|x|^2/(2 s^2)), closed form."""
    c = s ** 2 - 2j * t
    return (s ** 2 / c) ** 1.5 * np.exp(-grid.r2() / (2 * c))


def energy(m: PotentialModel, psi) -> float:
    a = as_array(psi, m.grid)
    return float(inner(a, apply_H_array(m, a), m.grid).real)


# -------------------------------------------------------- bound states

@dataclass
class BoundStates:
    energies: np.ndarray
    states: list       # orthonormal in the grid L^2 inner product
    residuals: np.ndarray


def bound_states(m: PotentialModel, n_max: int = 4, gap: float = 1e-2, tol: float = 1e-10,
                 shift: float | None = None) -> BoundStates:
    """Eigenpairs of the discretized H below -gap.

    Lanczos on the shifted inverse (H - s)^{-1}, with s below the spectrum and
    inner solves by CG preconditioned with (|xi|^2 - s)^{-1}.
    """
    g = m.grid
    key = ("bound", n_max, gap, tol)
    if key in m._cache:
        return m._cache[key]
    if m.is_zero:
        out = BoundStates(np.zeros(0), [], np.zeros(0))
        m._cache[key] = out
        return out
    # H = (p - A)^2 + V - |A|^2 is bounded below by min(V - |A|^2)
    floor = float(np.min(m.V - sum(a ** 2 for a in m.A)))
    s = min(floor, 0.0) - 1.0 if shift is None else float(shift)
    N = g.n ** 3
    prec_sym = 1.0 / (g.k2() - s)

    def H(u):
        return apply_H_array(m, u.reshape(g.shape)).ravel()

    Hs = LinearOperator((N, N), matvec=lambda u: H(u) - s * u, dtype=complex)
    M = LinearOperator((N, N), matvec=lambda u: ifftn(prec_sym * fftn(u.reshape(g.shape))).ravel(),
                       dtype=complex)

    def solve(b):
        x, info = cg(Hs, b, rtol=tol * 1e-2, maxiter=2000, M=M)
        if info != 0:
            raise RuntimeError(f"inner CG did not converge (info={info})")
        return x

    OPinv = LinearOperator((N, N), matvec=solve, dtype=complex)
    rng = np.random.default_rng(0)
    v0 = (rng.standard_normal(N) + 0j) * np.exp(-g.r2().ravel() / 4.0)
    k = n_max + 1
    try:
        vals, vecs = eigsh(Hs, k=k, sigma=0.0, which="LM", OPinv=OPinv, v0=v0, tol=tol,
                           maxiter=500)
    except Exception as exc:   # ArpackNoConvergence and friends
        raise RuntimeError(f"bound-state eigensolver failed: {exc}") from exc
    E = vals.real + s
    order = np.argsort(E)
    E, vecs = E[order], vecs[:, order]
    keep = E < -gap
    if keep.all():
        log.warning("all %d computed eigenvalues are bound; n_max may be too small", k)
    h3 = np.sqrt(g.cell_volume)
    states, res = [], []
    for e, v in zip(E[keep], vecs[:, keep].T):
        psi = v.reshape(g.shape) / (np.linalg.norm(v) * h3)
        states.append(psi)
        res.append(l2_norm(apply_H_array(m, psi) - e * psi, g))
    out = BoundStates(E[keep], states, np.array(res))
    m._cache[key] = out
    return out


def continuous_projection(m: PotentialModel, f, n_bound_states_max: int = 4, gap: float = 1e-2):
    """P_c f: f minus its components along the discretized bound states."""
    a = np.array(as_array(f, m.grid), dtype=complex)
    bs = bound_states(m, n_bound_states_max, gap)
    for psi in bs.states:
        a = a - inner(psi, a, m.grid) * psi
    return like(f, a)


# ------------------------------------------------------ space-time norms

@dataclass(frozen=True)
class AdmissiblePair:
    q: float
    p: float

    def __post_init__(self):
        q, p = float(self.q), float(self.p)
        if q == 2:
            raise AdmissibilityError("endpoint q=2 excluded")
        if not 2 <= p < 6:
            raise AdmissibilityError(f"p = {p} outside [2, 6)")
        if abs(2 / q + 3 / p - 1.5) > 1e-12:
            raise AdmissibilityError(f"(q, p) = ({q}, {p}) violates 2/q + 3/p = 3/2")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @classmethod
    def from_p(cls, p: float) -> "AdmissiblePair":
        r = 0.75 - 1.5 / p
        return cls(np.inf if r == 0 else 1.0 / r, p)


def lp_norm(a: np.ndarray, grid: GridSpec, p: float) -> float:
    if np.isinf(p):
        return float(np.max(np.abs(a)))
    return float((np.sum(np.abs(a) ** p) * grid.cell_volume) ** (1.0 / p))


def characteristic_lambda(psi: np.ndarray, grid: GridSpec) -> float:
    """sqrt(<psi, -Delta psi> / ||psi||^2)."""
    hat = fftn(psi)
    w = np.abs(hat) ** 2
    tot = w.sum()
    return float(np.sqrt((grid.k2() * w).sum() / tot)) if tot > 0 else 0.0


def _check_sampling(run: EvolutionRun):
    if len(run.times) < 2:
        return
    gap = float(np.max(np.diff(run.times)))
    lam = characteristic_lambda(run.psi0, run.grid)
    if lam > 0 and gap > 0.1 / lam:
        raise ValueError(f"snapshot spacing {gap:.3g} exceeds 0.1/lambda_char = {0.1 / lam:.3g}")


def strichartz_norm(run: EvolutionRun, pair: AdmissiblePair, horizon: float | None = None) -> float:
    """(int (int |psi|^p dx)^{q/p} dt)^{1/q} over the stored snapshots."""
    if not isinstance(pair, AdmissiblePair):
        pair = AdmissiblePair(*pair)
    _check_sampling(run)
    sel = run.times <= (run.horizon if horizon is None else horizon) + 1e-12
    vals = np.array([lp_norm(s, run.grid, pair.p) for s, k in zip(run.snapshots, sel) if k])
    if np.isinf(pair.q):
        return float(vals.max())
    return float(trapezoid(vals ** pair.q, run.times[sel]) ** (1.0 / pair.q))


@dataclass
class SmoothingResult:
    value: float
    tail: float
    horizon: float
    times: np.ndarray
    integrand: np.ndarray

    def to_dict(self) -> dict:
        return {"value": self.value, "tail": self.tail, "horizon": self.horizon}


def smoothing_norm(run: EvolutionRun, sigma_weight: float = 4.5,
                   horizon: float | None = None) -> SmoothingResult:
    """int_0^T ||<x>^-sigma <grad>^(1/2) psi(t)||^2 dt.

    The tail estimate assumes the t^-3 decay of a dispersing packet in a fixed
    weight region: int_T^inf = I(T) T / 2.
    """
    g = run.grid
    w = weight(g, -sigma_weight)
    T = run.horizon if horizon is None else float(horizon)
    sel = run.times <= T + 1e-12
    times = run.times[sel]
    vals = np.array([l2_norm(w * sobolev_array(s, g, 0.5), g) ** 2
                     for s, k in zip(run.snapshots, sel) if k])
    value = float(trapezoid(vals, times)) if len(times) > 1 else 0.0
    return SmoothingResult(value, float(vals[-1] * times[-1] / 2), float(times[-1]), times, vals)


def write_series(run: EvolutionRun, path, p: float = 3.0, sigma_weight: float = 4.5):
    """CSV time series (t, l2, lp, weighted_h_half)."""
    g = run.grid
    w = weight(g, -sigma_weight)
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("t,l2,lp,weighted_h_half\n")
        for t, s in zip(run.times, run.snapshots):
            fh.write(f"{t:.12g},{l2_norm(s, g):.12g},{lp_norm(s, g, p):.12g},"
                     f"{l2_norm(w * sobolev_array(s, g, 0.5), g):.12g}\n")


# ------------------------------------------------------- Kato constants

class Via(str, Enum):
    TIME = "TimeDomain"
    RESOLVENT = "ResolventDomain"


@dataclass
class KatoEstimate:
    value: float
    via: Via
    per_probe: list
    tail: float = 0.0

    def to_dict(self) -> dict:
        return {"value": self.value, "via": self.via.value, "per_probe": list(self.per_probe),
                "tail": self.tail}


def band_probes(grid: GridSpec, n_probes: int, k_lo: float, k_hi: float, envelope: float,
                seed: int = 0) -> list:
    """Random L^2-normalized probes with spectrum in a smooth shell k_lo < |xi| < k_hi."""
    rng = np.random.default_rng(seed)
    k = np.sqrt(grid.k2())
    mid, half = 0.5 * (k_lo + k_hi), 0.5 * (k_hi - k_lo)
    shell = np.clip(1 - ((k - mid) / half) ** 2, 0, None) ** 4
    env = np.exp(-grid.r2() / envelope ** 2)
    out = []
    for _ in range(n_probes):
        a = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
        a = ifftn(shell * fftn(env * a))
        out.append(a / l2_norm(a, grid))
    return out


def _energy_nodes(window, kcut: float, n_nodes: int):
    """Gauss-Legendre nodes (E, weight) for dE over the window, integrating in
    k = sqrt|E| and truncating infinite ends at |E| = kcut^2."""
    lo, hi = window
    xg, wg = np.polynomial.legendre.leggauss(n_nodes)
    nodes = []

    def seg(a, b, sign):
        if b <= a:
            return
        x = 0.5 * (b - a) * xg + 0.5 * (b + a)
        for xi, wi in zip(x, 0.5 * (b - a) * wg):
            nodes.append((sign * xi ** 2, wi * 2 * xi))

    if hi > 0:
        a = np.sqrt(max(lo, 0.0))
        b = np.sqrt(hi) if np.isfinite(hi) else kcut
        seg(a, 0.5 * (a + b), 1.0)
        seg(0.5 * (a + b), b, 1.0)
    if lo < 0:
        a = np.sqrt(max(-hi, 0.0))
        b = np.sqrt(-lo) if np.isfinite(lo) else kcut
        seg(a, b, -1.0)
    return nodes


def kato_constant(m: PotentialModel, gamma, lambda_window=(0.0, np.inf), via=Via.RESOLVENT,
                  probes=None, n_probes: int = 4, seed: int = 0, horizon: float = 2.0,
                  dt: float = 0.01, n_nodes: int = 24, solve_tol: float = 1e-8) -> KatoEstimate:
    """Smoothing constant of gamma (a callable on position arrays) relative to H.

    TimeDomain: max over probes of (int_0^T ||gamma exp(itH) P f||^2 dt)^(1/2),
    with P the free spectral projection on the window (zero model) or P_c.
    ResolventDomain: max over probes of ((2 pi)^-1 int_window ||gamma R(E - i0) f||^2 dE)^(1/2);
    for the whole line this equals the one-sided time integral by Plancherel.
    """
    via = Via(via)
    g = m.grid
    if probes is None:
        probes = band_probes(g, n_probes, 0.5, 0.6 * g.frequency_cutoff, g.box_half_width / 4,
                             seed)
    probes = [np.asarray(as_array(p, g), dtype=complex) for p in probes]
    lo, hi = lambda_window
    per, tails = [], []
    if via is Via.TIME:
        for f in probes:
            if m.is_zero:
                ind = (g.k2() >= lo) & (g.k2() <= hi)
                f = ifftn(fftn(f) * ind)
            else:
                if lo > 0 or np.isfinite(hi):
                    raise ValueError("TimeDomain window restriction is only available for the "
                                     "free model; use ResolventDomain")
                f = continuous_projection(m, f)
            nrm = l2_norm(f, g) if l2_norm(f, g) > 0 else 1.0
            run = propagate(m, f, dt, int(round(horizon / dt)))
            vals = np.array([l2_norm(gamma(s), g) ** 2 for s in run.snapshots])
            per.append(float(np.sqrt(trapezoid(vals, run.times)) / nrm))
            tails.append(float(vals[-1] * run.times[-1] / 2) / nrm ** 2)
        return KatoEstimate(max(per), via, per, max(tails))

    if not m.is_zero and lo < 0:
        raise ValueError("ResolventDomain for a perturbed model needs a window in (0, inf)")
    kcut = 2.0 * g.frequency_cutoff
    nodes = _energy_nodes((lo, hi), kcut, n_nodes)
    if not m.is_zero:
        from .bs_ops import perturbed_resolvent_apply
    acc = np.zeros(len(probes))
    for E, wE in nodes:
        if m.is_zero:
            ker = free_space_kernel(g, kappa_of_energy(E, 0.0, Branch.MINUS))
            us = [ker.apply(f) for f in probes]
        else:
            us = [perturbed_resolvent_apply(m, f, np.sqrt(E), Branch.MINUS, solve_tol)
                  for f in probes]
        acc += wE * np.array([l2_norm(gamma(u), g) ** 2 for u in us])
    # beyond |E| = kcut^2, R(E) f ~ -f / E
    ends = (not np.isfinite(hi)) + (lo < 0 and not np.isfinite(lo))
    tail = ends * np.array([l2_norm(gamma(f), g) ** 2 for f in probes]) / kcut ** 2
    norms = np.array([l2_norm(f, g) for f in probes])
    norms[norms == 0] = 1.0
    per = list(np.sqrt((acc + tail) / (2 * np.pi)) / norms)
    return KatoEstimate(float(max(per)), via, [float(x) for x in per],
                        float(max(tail / (2 * np.pi) / norms ** 2)))


# ------------------------------------------------------ Strichartz budget

@dataclass
class BudgetReport:
    lhs: float            # max over probes of ||exp(itH) P f||_{L^q L^p} / ||f||
    c_h0: float           # free Strichartz calibration on the same probes
    c_b: float            # max_j Kato constant of Y_j relative to H0
    c_a: float            # max_j Kato constant of Z_j relative to H on the window
    J: int
    budget: float         # C_H0 (1 + J C_B C_A)
    ratio: float
    literal_budget: float  # J C_H0 C_B C_A
    literal_ratio: float
    pair: tuple
    window: tuple

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def strichartz_budget_check(m: PotentialModel, pair=(4.0, 3.0), omega_window=(0.0, np.inf),
                            probes=None, n_probes: int = 2, seed: int = 0, horizon: float = 1.0,
                            dt: float = 0.01, sigma_weight: float = 4.5, n_nodes: int = 16,
                            kato_probes: int = 3) -> BudgetReport:
    """Compare the perturbed Strichartz norm with the factorized budget.

    The Duhamel formula exp(itH) = exp(itH0) + i int exp(i(t-s)H0) Y* Z exp(isH) ds
    gives ||exp(itH) P f|| <= C_H0 (1 + J C_B C_A) ||f||; the ratio is taken
    against that budget and the product J C_H0 C_B C_A (which omits the free
    term and vanishes with the coupling) is reported alongside.
    """
    from .bs_ops import FactorKind, FactorOp, factor_apply_array
    from .potentials import zero_model

    if not isinstance(pair, AdmissiblePair):
        pair = AdmissiblePair(*pair)
    g = m.grid
    free = zero_model(g)
    if probes is None:
        probes = band_probes(g, n_probes, 0.5, 0.5 * g.frequency_cutoff, g.box_half_width / 4, seed)
    n_steps = int(round(horizon / dt))
    lhs, c_h0 = 0.0, 0.0
    for f in probes:
        f = np.asarray(as_array(f, g), dtype=complex)
        nrm = l2_norm(f, g)
        pf = continuous_projection(m, f) if not m.is_zero else f
        if np.isfinite(omega_window[1]) or omega_window[0] > 0:
            if not m.is_zero:
                raise ValueError("window projections other than P_c need the free model")
            ind = (g.k2() >= omega_window[0]) & (g.k2() <= omega_window[1])
            pf = ifftn(fftn(pf) * ind)
        run = propagate(m, pf, dt, n_steps)
        lhs = max(lhs, strichartz_norm(run, pair) / nrm)
        run0 = propagate(free, f, dt, n_steps)
        c_h0 = max(c_h0, strichartz_norm(run0, pair) / nrm)
    J = 2
    if m.is_zero:
        c_b = c_a = 0.0
    else:
        kp = band_probes(g, kato_probes, 0.5, 0.5 * g.frequency_cutoff, g.box_half_width / 4,
                         seed + 101)
        ys = [FactorOp(FactorKind.Y1STAR, m, sigma_weight), FactorOp(FactorKind.Y2STAR, m, sigma_weight)]
        zs = [FactorOp(FactorKind.Z1, m, sigma_weight), FactorOp(FactorKind.Z2, m, sigma_weight)]
        c_b = max(kato_constant(free, lambda u, op=op: factor_apply_array(op, u, adjoint=True),
                                (-np.inf, np.inf), Via.RESOLVENT, probes=kp, n_nodes=n_nodes).value
                  for op in ys)
        c_a = max(kato_constant(m, lambda u, op=op: factor_apply_array(op, u),
                                omega_window, Via.RESOLVENT, probes=kp, n_nodes=n_nodes).value
                  for op in zs)
    budget = c_h0 * (1 + J * c_b * c_a)
    literal = J * c_h0 * c_b * c_a
    return BudgetReport(lhs, c_h0, c_b, c_a, J, budget, lhs / budget if budget > 0 else np.inf,
                        literal, lhs / literal if literal > 0 else np.inf,
                        (pair.q, pair.p), tuple(float(x) for x in omega_window))
