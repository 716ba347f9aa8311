"""Weighted factorisation L = Y1* Z1 + Y2* Z2, operator norms, the Fredholm
solve of I + R0 L, partial Neumann series, zero-energy diagnostics and the
limiting-absorption scan.

w = <x>^-sigma throughout, and

    Y1* = 2i A w^-1 . grad <grad>^-1/2,       Z1 = <grad>^1/2 w,
    Y2* = [2i A . grad(w^-1) w + i div A + V] w^-1,   Z2 = w.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .grid import GridSpec, as_array, fftn, ifftn, japanese, l2_norm, like, sobolev_array, weight
from .potentials import PotentialModel, apply_L_array
from .resolvent import (Branch, _branch, conj_branch, extrapolate_to_zero, grid_for_lambda,
                        resolvent_apply, t_symbol, zero_energy_apply)

log = logging.getLogger(__name__)

DEFAULT_SIGMA = 4.5


# ------------------------------------------------------------------ factors

class FactorKind(str, Enum):
    Y1STAR = "Y1star"
    Z1 = "Z1"
    Y2STAR = "Y2star"
    Z2 = "Z2"
    Z1INV = "Z1inv"


@dataclass
class FactorOp:
    kind: FactorKind
    model: PotentialModel
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        self.kind = FactorKind(self.kind)


def _y2_coefficient(m: PotentialModel, sigma: float) -> np.ndarray:
    """2i A.grad(w^-1) w + i div A + V, with grad(w^-1) w = sigma x/<x>^2 exactly."""
    g = m.grid
    xs = g.coords()
    inv_r = 1.0 / (1.0 + g.r2())
    adotx = sum(m.A[j] * xs[j] for j in range(3))
    return 2j * sigma * adotx * inv_r + 1j * m.div_A + m.V


def factor_apply_array(op: FactorOp, f: np.ndarray, adjoint: bool = False) -> np.ndarray:
    m, s, g = op.model, op.sigma, op.model.grid
    w = weight(g, -s)
    winv = weight(g, s)
    k = op.kind
    if k is FactorKind.Z2:
        return w * f
    if k is FactorKind.Z1:
        if adjoint:
            return w * sobolev_array(f, g, 0.5)
        return sobolev_array(w * f, g, 0.5)
    if k is FactorKind.Z1INV:
        if adjoint:
            return sobolev_array(winv * f, g, -0.5)
        return winv * sobolev_array(f, g, -0.5)
    if k is FactorKind.Y2STAR:
        c = _y2_coefficient(m, s) * winv
        return (np.conj(c) if adjoint else c) * f
    if k is FactorKind.Y1STAR:
        a = [2j * m.A[j] * winv for j in range(3)]
        if adjoint:
            # (a.grad T)* h = -T div(conj(a) h)
            hat = sum(1j * kk * fftn(np.conj(a[j]) * f) for j, kk in enumerate(g.freqs()))
            return ifftn(-hat * _half_inv(g))
        fh = fftn(f) * _half_inv(g)
        return sum(a[j] * ifftn(1j * kk * fh) for j, kk in enumerate(g.freqs()))
    raise ValueError(k)


def _half_inv(g: GridSpec):
    return japanese(g.k2(), -0.5)


def factor_apply(op: FactorOp, f, adjoint: bool = False):
    """Apply one factor of the weighted decomposition (or its adjoint)."""
    a = as_array(f, op.model.grid)
    if op.kind is FactorKind.Z1INV:
        band = np.abs(fftn(a))
        edge = band[op.model.grid.k2() > (0.8 * op.model.grid.frequency_cutoff) ** 2]
        if edge.size and np.sqrt(np.sum(edge ** 2)) > 1e-6 * np.sqrt(np.sum(band ** 2)):
            log.warning("Z1inv applied to a field with energy near k_max; "
                        "the inverse weight amplifies wrap-around error")
    return like(f, factor_apply_array(op, a, adjoint))


# ------------------------------------------------------------ norm estimate

@dataclass
class NormEstimate:
    value: float
    iterations: int
    residual: float
    converged: bool
    history: list = field(default_factory=list)
    vector: np.ndarray | None = field(default=None, repr=False)

    @property
    def lower_bound_only(self) -> bool:
        return not self.converged

    def to_dict(self) -> dict:
        return {"converged": self.converged, "iterations": self.iterations,
                "residual": float(self.residual), "value": float(self.value)}


@dataclass
class LinOp:
    """A linear map on grid arrays with its adjoint."""
    apply: Callable
    adjoint: Callable
    grid: GridSpec

    def __call__(self, f):
        return self.apply(f)


def complex_symmetric_adjoint(op: Callable) -> Callable:
    """Adjoint of an operator whose matrix is complex symmetric: conj . op . conj."""
    return lambda f: np.conj(op(np.conj(f)))


def check_linear(op: Callable, grid: GridSpec, rng: np.random.Generator, tol: float = 1e-8) -> bool:
    f = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    g = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    a, b = 0.7 - 0.2j, -1.3 + 0.5j
    lhs = op(a * f + b * g)
    rhs = a * op(f) + b * op(g)
    return l2_norm(lhs - rhs, grid) <= tol * max(l2_norm(rhs, grid), 1e-300)


def op_norm_estimate(op, grid: GridSpec | None = None, tol: float = 1e-4, max_iter: int = 60,
                     adjoint: Callable | None = None, seed: int = 0,
                     start: np.ndarray | None = None, check: bool = False) -> NormEstimate:
    """Largest singular value by power iteration on Op* Op.

    ``adjoint`` defaults to conj . Op . conj (exact for complex-symmetric
    operators such as w R0(z) w).  The returned value is always a certified
    lower bound; ``converged`` reports whether the relative change dropped
    below tol.
    """
    if isinstance(op, LinOp):
        grid = op.grid
        adjoint = op.adjoint
        op = op.apply
    if adjoint is None:
        adjoint = complex_symmetric_adjoint(op)
    rng = np.random.default_rng(seed)
    if check and not check_linear(op, grid, rng):
        raise ValueError("operator failed the linearity spot check")
    v = start if start is not None else (rng.standard_normal(grid.shape)
                                         + 1j * rng.standard_normal(grid.shape))
    v = v / l2_norm(v, grid)
    old, val, res = 0.0, 0.0, np.inf
    hist = []
    it = 0
    for it in range(1, max_iter + 1):
        u = op(v)
        val = l2_norm(u, grid)
        hist.append(val)
        if val == 0:
            return NormEstimate(0.0, it, 0.0, True, hist, v)
        res = abs(val - old) / val
        if res < tol:
            return NormEstimate(val, it, res, True, hist, v)
        old = val
        v = adjoint(u)
        nv = l2_norm(v, grid)
        if nv == 0:
            return NormEstimate(val, it, 0.0, True, hist, v)
        v = v / nv
    log.info("power iteration hit max_iter=%d (rel change %.2e); value is a lower bound", max_iter, res)
    return NormEstimate(val, it, res, False, hist, v)


# ------------------------------------------------------------ Fredholm solve

class SolveMethod(str, Enum):
    DIRECT_ITERATIVE = "DirectIterative"
    PARTIAL_NEUMANN = "PartialNeumann"


@dataclass
class SolveReport:
    method: SolveMethod
    iterations: int
    residual: float
    converged: bool
    neumann_order: int | None = None

    def to_dict(self) -> dict:
        return {"converged": self.converged, "iterations": self.iterations,
                "method": self.method.value, "neumann_order": self.neumann_order,
                "residual": float(self.residual)}


class SolveError(RuntimeError):
    def __init__(self, msg, report: SolveReport):
        super().__init__(msg)
        self.report = report


def _gmres(matvec, b: np.ndarray, grid: GridSpec, tol: float, restart: int = 30,
           maxiter: int = 20, x0: np.ndarray | None = None):
    """Restarted GMRES on grid arrays. Returns (x, iterations, true residual)."""
    N = b.size
    A = LinearOperator((N, N), matvec=lambda x: matvec(x.reshape(grid.shape)).ravel(),
                       dtype=complex)
    count = [0]

    def cb(_):
        count[0] += 1

    x, info = gmres(A, b.ravel(), x0=None if x0 is None else x0.ravel(), rtol=tol, atol=0.0,
                    restart=restart, maxiter=maxiter, callback=cb, callback_type="pr_norm")
    x = x.reshape(grid.shape)
    r = matvec(x) - b
    res = l2_norm(r, grid) / max(l2_norm(b, grid), 1e-300)
    return x, count[0], res


def _one_plus_r0l(m: PotentialModel, lam: float, eps: float, branch, method: str):
    g = m.grid

    def mv(u):
        return u + resolvent_apply(apply_L_array(m, u, "divergence"), g, lam, eps, branch, method)
    return mv


def bs_solve(m: PotentialModel, g, lam: float, epsilon: float = 0.0, branch=Branch.PLUS,
             tol: float = 1e-8, method: str = "free_space", raise_on_fail: bool = True):
    """Solve (I + R0(lambda^2 +/- i eps) L) u = g by restarted GMRES.

    The whole-space resolvent admits eps = 0; the torus form needs eps > 0.
    """
    grid = m.grid
    b = as_array(g, grid).astype(complex)
    if m.is_zero or not np.any(b):
        return like(g, b.copy()), SolveReport(SolveMethod.DIRECT_ITERATIVE, 0, 0.0, True)
    if method == "periodic" and not epsilon > 0:
        raise ValueError("the torus resolvent needs epsilon > 0")
    mv = _one_plus_r0l(m, lam, epsilon, branch, method)
    u, its, res = _gmres(mv, b, grid, tol)
    rep = SolveReport(SolveMethod.DIRECT_ITERATIVE, its, res, bool(res <= 10 * tol))
    if not rep.converged and raise_on_fail:
        raise SolveError(f"GMRES stagnated at lambda={lam}: residual {res:.2e}", rep)
    return like(g, u), rep


def perturbed_resolvent_apply(m: PotentialModel, f, lam: float, branch=Branch.PLUS,
                              tol: float = 1e-8, epsilon: float = 0.0, method: str = "free_space",
                              extrapolate: bool = False, levels: int = 5):
    """R_L(lambda^2 +/- i0) f = (I + R0 L)^-1 R0 f.

    By default the whole-space boundary value at eps = 0 is used directly;
    with ``extrapolate`` the eps-sequence of the absorbing problems is
    extrapolated to eps = 0 instead (returns (field, report) in that case).
    """
    grid = m.grid
    a = as_array(f, grid)

    def at(eps):
        u0 = resolvent_apply(a, grid, lam, eps, branch, method)
        u, _ = bs_solve(m, u0, lam, eps, branch, tol, method)
        return u

    if extrapolate:
        u, rep = extrapolate_to_zero(at, lam, branch, grid, tol=1e-4, levels=levels, method=method)
        return like(f, u), rep
    if method == "periodic" and not epsilon > 0:
        raise ValueError("the torus resolvent needs epsilon > 0")
    return like(f, at(epsilon))


def _sk_operator(m: PotentialModel, lam: float, eps: float, branch, method: str):
    """K = S_lambda L T_lambda = T^-1 R0 L T."""
    g = m.grid
    t_fwd = t_symbol(g, lam, -1.0)
    t_inv = t_symbol(g, lam, 1.0)

    def K(u):
        v = ifftn(fftn(u) * t_fwd)
        v = resolvent_apply(apply_L_array(m, v, "divergence"), g, lam, eps, branch, method)
        return ifftn(fftn(v) * t_inv)
    return K


def partial_neumann_solve(m: PotentialModel, g, lam: float, epsilon: float = 0.0,
                          m_order: int = 2, tol: float = 1e-8, branch=Branch.PLUS,
                          method: str = "free_space"):
    """(I + K)^-1 g with K = S_lambda L T_lambda, written as

        (I + K)^-1 = [sum_{k<=m} (-K)^k] (I - (-K)^{m+1})^-1 .

    The inner system is solved by GMRES; m_order = 0 is a plain solve of I + K.
    """
    grid = m.grid
    b = as_array(g, grid).astype(complex)
    if m.is_zero:
        return like(g, b.copy()), SolveReport(SolveMethod.PARTIAL_NEUMANN, 0, 0.0, True, m_order)
    K = _sk_operator(m, lam, epsilon, branch, method)
    sign = (-1.0) ** m_order  # I - (-K)^{m+1} = I + (-1)^m K^{m+1}

    def inner(u):
        v = u
        for _ in range(m_order + 1):
            v = K(v)
        return u + sign * v

    y, its, res = _gmres(inner, b, grid, tol)
    out = y.copy()
    term = y
    for _ in range(m_order):
        term = -K(term)
        out = out + term
    rep = SolveReport(SolveMethod.PARTIAL_NEUMANN, its, res, bool(res <= 10 * tol), m_order)
    if not rep.converged:
        raise SolveError(f"inner solve stagnated at lambda={lam}", rep)
    return like(g, out), rep


# ------------------------------------------------------ zero-energy analysis

def _zero_energy_ops(m: PotentialModel, sigma: float):
    """K = Z1 G L Z1^-1 and its adjoint."""
    g = m.grid
    w = weight(g, -sigma)
    winv = weight(g, sigma)

    def K(f):
        u = winv * sobolev_array(f, g, -0.5)
        u = zero_energy_apply(apply_L_array(m, u, "divergence"), g)
        return sobolev_array(w * u, g, 0.5)

    def KH(f):
        u = w * sobolev_array(f, g, 0.5)
        u = zero_energy_apply(u, g)
        # the gradient form is the exact grid adjoint of the divergence form
        u = apply_L_array(m, u, "gradient")
        return sobolev_array(winv * u, g, -0.5)
    return K, KH


def zero_mode_check(m: PotentialModel, tol: float = 1e-3, sigma: float = DEFAULT_SIGMA,
                    max_iter: int = 40, seed: int = 0) -> NormEstimate:
    """Smallest singular value of I + Z1 G L Z1^-1 by inverse power iteration.

    Each step solves (I+K) x = v and (I+K)* y = x with GMRES; the returned
    NormEstimate.value is 1/||(I+K)^-1||.
    """
    g = m.grid
    if m.is_zero:
        return NormEstimate(1.0, 0, 0.0, True)
    K, KH = _zero_energy_ops(m, sigma)
    fwd = lambda u: u + K(u)
    bwd = lambda u: u + KH(u)
    inv = lambda v: _gmres(fwd, v, g, 1e-10)[0]
    invH = lambda v: _gmres(bwd, v, g, 1e-10)[0]
    est = op_norm_estimate(inv, g, tol=tol, max_iter=max_iter, adjoint=invH, seed=seed)
    return NormEstimate(1.0 / est.value, est.iterations, est.residual, est.converged, est.history)


def compactness_diagnostic(m: PotentialModel, k: int = 10, sigma: float = DEFAULT_SIGMA,
                           seed: int = 0) -> np.ndarray:
    """Leading k singular values of Z1 G L Z1^-1 (Lanczos bidiagonalisation via ARPACK)."""
    from scipy.sparse.linalg import svds
    g = m.grid
    if m.is_zero:
        return np.zeros(k)
    K, KH = _zero_energy_ops(m, sigma)
    N = g.n ** 3
    A = LinearOperator((N, N), dtype=complex,
                       matvec=lambda x: K(x.reshape(g.shape)).ravel(),
                       rmatvec=lambda x: KH(x.reshape(g.shape)).ravel())
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(N) + 1j * rng.standard_normal(N)
    s = svds(A, k=k, v0=v0, return_singular_vectors=False, tol=1e-6)
    # svds returns l2 singular values of the grid matrix; the h^3 measure cancels
    return np.sort(s)[::-1]


# ----------------------------------------------------------- limap scan

def weighted_resolvent_op(grid: GridSpec, lam: float, alpha: float = 0.0,
                          sigma: float = DEFAULT_SIGMA, model: PotentialModel | None = None,
                          tol: float = 1e-8, branch=Branch.PLUS) -> LinOp:
    """<grad>^alpha w R(lambda^2 +/- i0) w <grad>^alpha, free or perturbed."""
    w = weight(grid, -sigma)
    branch = _branch(branch)

    def build(b):
        def op(f):
            u = w * sobolev_array(f, grid, alpha)
            if model is None or model.is_zero:
                u = resolvent_apply(u, grid, lam, 0.0, b)
            else:
                u = perturbed_resolvent_apply(model, u, lam, b, tol)
            return sobolev_array(w * u, grid, alpha)
        return op
    return LinOp(build(branch), build(conj_branch(branch)), grid)


def limap_scan(m: PotentialModel | None, lambda_list, alpha: float = 0.0,
               sigma_weight: float = DEFAULT_SIGMA, tol: float = 1e-3, box_half_width: float = 4.0,
               k_ratio: float = 1.5, max_iter: int = 40, solve_tol: float = 1e-7,
               seed: int = 0) -> list:
    """Rows (lambda, alpha, raw_norm, normalized_norm, iterations, residual) with
    normalized_norm = <lambda>^(1-2 alpha) ||<grad>^a w R_L(lambda^2+i0) w <grad>^a||.

    Each lambda uses the smallest power-of-two grid on the box that resolves
    |xi| = k_ratio * lambda and is at least as fine as the model's own grid;
    the model is resampled onto it.
    """
    if not sigma_weight > 4:
        raise ValueError("sigma_weight must exceed 4")
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    rows = []
    for lam in sorted(float(x) for x in lambda_list):
        g = grid_for_lambda(lam, box_half_width, k_ratio,
                            h_max=None if m is None else m.grid.spacing)
        mm = None if m is None else m.regrid(g)
        row = {"lambda": lam, "alpha": float(alpha), "n": g.n}
        try:
            op = weighted_resolvent_op(g, lam, alpha, sigma_weight, mm, solve_tol)
            est = op_norm_estimate(op, tol=tol, max_iter=max_iter, seed=seed)
            row.update(raw_norm=est.value,
                       normalized_norm=est.value * (1 + lam ** 2) ** (0.5 * (1 - 2 * alpha)),
                       iterations=est.iterations, residual=est.residual, status="ok")
        except Exception as exc:  # recorded per lambda, scan continues
            log.warning("limap_scan failed at lambda=%s: %s", lam, exc)
            row.update(raw_norm=float("nan"), normalized_norm=float("nan"), iterations=0,
                       residual=float("nan"), status=f"error: {exc}")
        rows.append(row)
    return rows
