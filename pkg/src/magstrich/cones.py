"""Conical decomposition of the outgoing free resolvent.

Cap partitions of unity on S^2, sphere quadrature, the cone multiplier

    K(xi) = int_{S^2} (eps - i(1 - omega.xi))^-2 chi(omega) dsigma(omega)

(the Fourier transform of e^{(i-eps)|x|} chi(x/|x|)/|x|, i.e. 4 pi times that of
the cone-cut Green kernel at lambda = 1), its case-region bounds, the shell
principal-value functional, cone-restricted resolvents on the grid, two-cone
compositions, chain classification, near/far splitting, power-norm scans and
the chain budget arithmetic.
"""
from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np
import scipy.fft as sfft
from numpy.polynomial import chebyshev as C

from . import grid as _grid
from .bs_ops import LinOp, NormEstimate, op_norm_estimate
from .grid import GridSpec, fftn, ifftn, make_grid, weight
from .potentials import PotentialModel, apply_L_array
from .resolvent import Branch, grid_for_lambda, resolvent_apply

log = logging.getLogger(__name__)

MAX_CAPS = 20000


# ------------------------------------------------------------- sphere tools

def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def geodesic(u, v) -> np.ndarray:
    """Great-circle distance between unit vectors (broadcasting over the last axis)."""
    c = np.clip(np.sum(np.asarray(u) * np.asarray(v), axis=-1), -1.0, 1.0)
    return np.arccos(c)


def _frame(c):
    """Orthonormal (e1, e2, c) with c the given unit vector."""
    c = _unit(c)
    a = np.array([1.0, 0.0, 0.0]) if abs(c[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = _unit(a - np.dot(a, c) * c)
    e2 = np.cross(c, e1)
    return e1, e2, c


def icosahedral_points(freq: int) -> np.ndarray:
    """Vertices of the frequency-`freq` geodesic subdivision of the icosahedron."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=float)
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    pts = []
    for a, b, c in faces:
        A, B, Cc = v[a], v[b], v[c]
        for i in range(freq + 1):
            for j in range(freq + 1 - i):
                k = freq - i - j
                pts.append((i * A + j * B + k * Cc) / freq)
    pts = _unit(np.array(pts))
    _, idx = np.unique(np.round(pts, 9), axis=0, return_index=True)
    return pts[np.sort(idx)]


@dataclass(frozen=True)
class SphereRule:
    nodes: np.ndarray
    weights: np.ndarray
    degree: int

    def integrate(self, values) -> complex:
        return np.tensordot(np.asarray(values), self.weights, axes=([-1], [0]))


@lru_cache(maxsize=32)
def make_sphere_rule(degree: int) -> SphereRule:
    """Gauss-Legendre in cos(theta) times the uniform azimuthal rule; exact for
    spherical harmonics of degree <= `degree`."""
    nt = degree // 2 + 1
    nphi = degree + 1
    x, wx = np.polynomial.legendre.leggauss(nt)
    phi = 2.0 * np.pi * np.arange(nphi) / nphi
    st = np.sqrt(1.0 - x ** 2)
    nodes = np.stack([np.outer(st, np.cos(phi)), np.outer(st, np.sin(phi)),
                      np.outer(x, np.ones(nphi))], axis=-1).reshape(-1, 3)
    weights = np.outer(wx, np.full(nphi, 2.0 * np.pi / nphi)).ravel()
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return SphereRule(nodes, weights, degree)


def cap_rule(center, radius: float, n_theta: int = 48, n_phi: int = 96) -> SphereRule:
    """Product rule on the geodesic disc of the given radius about `center`."""
    radius = min(float(radius), np.pi)
    e1, e2, c = _frame(center)
    x, wx = np.polynomial.legendre.leggauss(n_theta)
    th = 0.5 * radius * (x + 1.0)
    wt = 0.5 * radius * wx * np.sin(th)
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    st, ct = np.sin(th)[:, None], np.cos(th)[:, None]
    nodes = (st[..., None] * (np.cos(phi)[None, :, None] * e1 + np.sin(phi)[None, :, None] * e2)
             + ct[..., None] * c).reshape(-1, 3)
    weights = np.outer(wt, np.full(n_phi, 2.0 * np.pi / n_phi)).ravel()
    return SphereRule(nodes, weights, -1)


# ---------------------------------------------------------------- caps

def bump(d, radius: float, order: int = 4):
    """(1 - (d/radius)^2)^order on d < radius, zero outside."""
    t = np.asarray(d, dtype=float) / radius
    return np.where(t < 1.0, np.clip(1.0 - t * t, 0.0, None) ** order, 0.0)


@dataclass(frozen=True)
class Cap:
    """A single smooth cap cutoff, not normalised against neighbours."""
    center: tuple
    radius: float
    order: int = 4

    @property
    def full(self) -> bool:
        return self.radius >= np.pi

    @property
    def c(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)

    def chi(self, omega) -> np.ndarray:
        omega = np.asarray(omega, dtype=float)
        if self.full:
            return np.ones(omega.shape[:-1])
        return bump(geodesic(omega, self.c), self.radius, self.order)

    def grad_chi(self, omega) -> np.ndarray:
        """Tangential gradient of chi on S^2 (shape (..., 3))."""
        omega = np.asarray(omega, dtype=float)
        if self.full:
            return np.zeros(omega.shape)
        return _bump_tangent_grad(omega, self.c, self.radius, self.order)


def _bump_tangent_grad(omega, c, radius, order):
    cosd = np.clip(omega @ c, -1.0, 1.0)
    d = np.arccos(cosd)
    t = d / radius
    inside = t < 1.0
    db = np.where(inside, -2.0 * order * t * np.clip(1 - t * t, 0, None) ** (order - 1) / radius, 0.0)
    sind = np.sqrt(np.clip(1.0 - cosd ** 2, 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        fac = np.where(sind > 1e-12, -db / sind, 0.0)
    tang = c - cosd[..., None] * omega
    return fac[..., None] * tang


def antipodal_caps(delta: float, axis=(0.0, 0.0, 1.0), order: int = 4) -> tuple[Cap, Cap]:
    a = tuple(_unit(axis))
    return Cap(a, delta, order), Cap(tuple(-np.asarray(a)), delta, order)


@dataclass(frozen=True)
class PartitionCap:
    """Member `index` of a CapPartition; chi is the normalised cutoff."""
    partition: "CapPartition"
    index: int

    @property
    def center(self):
        return tuple(self.partition.centers[self.index])

    @property
    def c(self):
        return self.partition.centers[self.index]

    @property
    def radius(self):
        return self.partition.radius

    @property
    def order(self):
        return self.partition.order

    @property
    def full(self):
        return self.partition.radius >= np.pi

    def chi(self, omega):
        return self.partition.chi(self.index, omega)

    def grad_chi(self, omega):
        return self.partition.grad_chi(self.index, omega)


@dataclass(frozen=True, eq=False)
class CapPartition:
    delta: float
    centers: np.ndarray
    radius: float
    order: int = 4
    neighbours: tuple = field(default=(), repr=False)

    def __len__(self):
        return len(self.centers)

    @property
    def caps(self) -> list:
        return [PartitionCap(self, i) for i in range(len(self))]

    def bumps(self, omega, idx=None) -> np.ndarray:
        omega = np.asarray(omega, dtype=float)
        cs = self.centers if idx is None else self.centers[list(idx)]
        if self.radius >= np.pi:
            return np.ones((len(cs),) + omega.shape[:-1])
        d = np.arccos(np.clip(np.tensordot(cs, omega, axes=([1], [-1])), -1, 1))
        return bump(d, self.radius, self.order)

    def chi_all(self, omega) -> np.ndarray:
        b = self.bumps(omega)
        return b / np.sum(b, axis=0)

    def chi(self, i: int, omega) -> np.ndarray:
        nb = self.neighbours[i] if self.neighbours else tuple(range(len(self)))
        b = self.bumps(omega, nb)
        own = b[list(nb).index(i)]
        s = np.sum(b, axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(own > 0, own / np.where(s > 0, s, 1.0), 0.0)

    def grad_chi(self, i: int, omega) -> np.ndarray:
        """Tangential gradient of the normalised chi_i: (b_i' S - b_i S')/S^2."""
        omega = np.asarray(omega, dtype=float)
        nb = self.neighbours[i] if self.neighbours else tuple(range(len(self)))
        b = self.bumps(omega, nb)
        gb = np.stack([_bump_tangent_grad(omega, self.centers[j], self.radius, self.order)
                       for j in nb])
        k = list(nb).index(i)
        s = np.sum(b, axis=0)
        gs = np.sum(gb, axis=0)
        s = np.where(s > 0, s, 1.0)
        return (gb[k] * s[..., None] - b[k][..., None] * gs) / (s ** 2)[..., None]

    def to_dict(self) -> dict:
        return {"delta": self.delta, "n_caps": len(self), "order": self.order,
                "radius": self.radius}


def make_cap_partition(delta: float, order: int = 4) -> CapPartition:
    """Smooth partition of unity adapted to caps of size delta.

    Centres are a geodesic icosahedral point set with covering radius below
    0.6 delta; each cutoff is a bump of geodesic radius delta, normalised by
    the pointwise sum.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    if delta >= 2.0:
        c = np.array([[0.0, 0.0, 1.0]])
        return CapPartition(float(delta), c, np.pi, order, ((0,),))
    if delta > 1.0:
        raise ValueError("delta must lie in (0, 1] (or be >= 2 for the single full cap)")
    freq = max(1, int(math.ceil(1.1 / delta)))
    if 10 * freq ** 2 + 2 > MAX_CAPS:
        raise MemoryError(f"delta={delta} needs {10 * freq ** 2 + 2} caps (> {MAX_CAPS})")
    cs = icosahedral_points(freq)
    cs.setflags(write=False)
    dots = np.clip(cs @ cs.T, -1, 1)
    nb = tuple(tuple(np.nonzero(np.arccos(row) < 2.0 * delta + 1e-12)[0]) for row in dots)
    return CapPartition(float(delta), cs, float(delta), order, nb)


# -------------------------------------------------------------- multiplier

def _slice_profile(cap, xi_hat, n_s: int = 96, n_phi: int = 256):
    """psi(s) = int chi(s xi_hat + sqrt(1-s^2) (cos phi e1 + sin phi e2)) dphi as a
    Chebyshev interpolant on the s-range met by the support of chi."""
    e1, e2, xh = _frame(xi_hat)
    if cap.full:
        a, b = -1.0, 1.0
    else:
        gam = float(geodesic(xh, cap.c))
        a = math.cos(min(gam + cap.radius, np.pi))
        b = math.cos(max(gam - cap.radius, 0.0))
    if b - a < 1e-14:
        return None, a, b
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    ring = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2

    def psi(s):
        s = np.asarray(s, dtype=float)
        r = np.sqrt(np.clip(1.0 - s * s, 0.0, None))
        om = s[:, None, None] * xh + r[:, None, None] * ring[None]
        return cap.chi(om).mean(axis=1) * 2.0 * np.pi

    p = C.Chebyshev.interpolate(psi, n_s, domain=[a, b])
    return p, a, b


def _cauchy2(p, a: float, b: float, z: complex) -> complex:
    """int_a^b p(s) / (s - z)^2 ds for a Chebyshev polynomial p and Im z != 0."""
    t = (2.0 * z - a - b) / (b - a)
    rho = abs(t + np.sqrt(t * t - 1.0 + 0j))
    rho = max(rho, 1.0 / rho)
    if len(p.coef) * math.log(rho) > math.log(1e4):
        # z well separated from [a, b]: the polynomial must not be continued there
        n = int(min(2000, max(64, 40.0 / math.log(rho))))
        x, wx = np.polynomial.legendre.leggauss(n)
        s = 0.5 * (b - a) * (x + 1.0) + a
        return complex(np.sum(wx * p(s) / (s - z) ** 2) * 0.5 * (b - a))
    dp = p.deriv()
    # by parts: -[p/(s-z)]_a^b + int p'/(s-z); then subtract p'(z)
    bnd = -(p(b) / (b - z) - p(a) / (a - z))
    deg = max(len(dp.coef) + 2, 16)
    x, wx = np.polynomial.legendre.leggauss(deg)
    s = 0.5 * (b - a) * (x + 1.0) + a
    dpz = dp(z)
    smooth = np.sum(wx * (dp(s) - dpz) / (s - z)) * 0.5 * (b - a)
    return complex(bnd + smooth + dpz * (np.log(b - z) - np.log(a - z)))


class UnderResolvedError(ValueError):
    pass


def multiplier_eval(xi, cap, epsilon: float, rule: SphereRule | None = None,
                    n_s: int = 96, n_phi: int = 256, min_nodes: int = 50) -> complex:
    """K(xi) = int (eps - i(1 - omega.xi))^-2 chi(omega) dsigma(omega), lambda = 1.

    Default path: reduce to one dimension along xi_hat,
        K = -|xi|^-2 int psi(s) (s - z)^-2 ds,  z = (1 + i eps)/|xi|,
    with psi the azimuthal slice mass of chi, and integrate the near-singular
    kernel by parts plus subtraction.  With `rule`, evaluate by direct sphere
    quadrature instead (refused when fewer than `min_nodes` nodes fall in the
    support).
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    xi = np.asarray(xi, dtype=float)
    if rule is not None:
        vals = cap.chi(rule.nodes)
        inside = int(np.count_nonzero(vals > 0))
        if inside < min_nodes:
            raise UnderResolvedError(f"sphere rule has {inside} nodes in the cap support "
                                     f"(need >= {min_nodes})")
        den = (epsilon - 1j * (1.0 - rule.nodes @ xi)) ** -2
        return complex(np.sum(rule.weights * vals * den))
    r = float(np.linalg.norm(xi))
    if r < 1e-12:
        return complex((epsilon - 1j) ** -2 * cap_mass(cap))
    p, a, b = _slice_profile(cap, xi / r, n_s, n_phi)
    if p is None:
        return 0j
    z = (1.0 + 1j * epsilon) / r
    return -_cauchy2(p, a, b, z) / r ** 2


def cap_mass(cap) -> float:
    if cap.full:
        return 4.0 * np.pi
    rule = cap_rule(cap.c, cap.radius)
    return float(np.sum(rule.weights * cap.chi(rule.nodes)))


def scaled_multiplier(xi, lam: float, cap, epsilon: float, **kw) -> complex:
    """Fourier transform of e^{(i lam - eps)|x|} chi(x/|x|) / (4 pi |x|) at xi."""
    return multiplier_eval(np.asarray(xi) / lam, cap, epsilon / lam, **kw) / (4.0 * np.pi * lam ** 2)


class Case(int, Enum):
    LOW = 1
    FAR_ALIGNED = 2
    FAR_OFF_SHELL = 3
    FAR_ON_SHELL = 4
    RESONANT = 5


def _dilated_range(cap, xi_hat):
    """[a, b]: range of omega.xi_hat over the twice dilated support."""
    gam = float(geodesic(xi_hat, cap.c))
    r2 = 2.0 * cap.radius
    return math.cos(min(gam + r2, np.pi)), math.cos(max(gam - r2, 0.0))


def classify_xi(xi, cap) -> Case:
    """Case region of xi relative to the cap (lambda = 1)."""
    xi = np.asarray(xi, dtype=float)
    r = float(np.linalg.norm(xi))
    x3 = float(np.dot(xi, cap.c))
    if r <= 10.0:
        if x3 <= 0.5:
            return Case.LOW
        return Case.RESONANT if r >= 0.5 else Case.LOW
    if abs(x3) >= 0.5 * r:
        return Case.FAR_ALIGNED
    a, b = _dilated_range(cap, xi / r)
    return Case.FAR_ON_SHELL if a * r <= 1.0 <= b * r else Case.FAR_OFF_SHELL


def case_bound(case: Case, xi, delta: float, epsilon: float) -> float:
    r = float(np.linalg.norm(xi))
    if case is Case.LOW:
        return delta ** 2
    if case is Case.FAR_ALIGNED:
        return delta ** 2 / r ** 2
    if case in (Case.FAR_OFF_SHELL, Case.FAR_ON_SHELL):
        return 1.0 / r ** 2
    return delta ** -2 + 1.0 / (epsilon + abs(1.0 - r))


def _random_dir_in_band(rng, c, lo, hi):
    """Uniform direction with lo <= omega.c <= hi."""
    e1, e2, c = _frame(c)
    t = rng.uniform(lo, hi)
    ph = rng.uniform(0, 2 * np.pi)
    s = math.sqrt(max(0.0, 1 - t * t))
    return t * c + s * (math.cos(ph) * e1 + math.sin(ph) * e2)


def sample_case(case: Case, cap, rng: np.random.Generator, xi_max: float = 100.0,
                max_tries: int = 100000) -> np.ndarray:
    c = cap.c
    for _ in range(max_tries):
        if case in (Case.LOW, Case.RESONANT):
            r = rng.uniform(0.5 if case is Case.RESONANT else 0.0, 10.0)
            om = _unit(rng.standard_normal(3))
        else:
            r = math.exp(rng.uniform(math.log(10.0 * 1.0001), math.log(xi_max)))
            if case is Case.FAR_ALIGNED:
                om = _random_dir_in_band(rng, c, 0.5, 1.0) * rng.choice([-1.0, 1.0])
            else:
                om = _random_dir_in_band(rng, c, -0.5, 0.5)
        xi = r * om
        if classify_xi(xi, cap) is case:
            return xi
    raise RuntimeError(f"could not sample case {case.value}")


def _loglog_envelope_slope(r, v, bins: int = 6) -> float:
    r, v = np.asarray(r), np.asarray(v)
    edges = np.exp(np.linspace(np.log(r.min()), np.log(r.max()) * (1 + 1e-12), bins + 1))
    xs, ys = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        m = (r >= lo) & (r < hi)
        if np.any(m):
            k = np.argmax(v[m])
            xs.append(np.log(r[m][k]))
            ys.append(np.log(v[m][k]))
    if len(xs) < 2:
        return float("nan")
    return float(np.polyfit(xs, ys, 1)[0])


def multiplier_case_check(cap, delta: float, epsilon: float = 1e-3, sample_count: int = 200,
                          seed: int = 0, xi_max: float = 100.0) -> list:
    """Worst |K|/bound per case region, plus the log-log envelope slope in |xi|
    for the far cases.  Rows: case, samples, max_ratio, slope, bound."""
    rng = np.random.default_rng(seed)
    names = {Case.LOW: "delta^2", Case.FAR_ALIGNED: "delta^2/|xi|^2",
             Case.FAR_OFF_SHELL: "|xi|^-2", Case.FAR_ON_SHELL: "|xi|^-2",
             Case.RESONANT: "delta^-2 + 1/(eps + |1-|xi||)"}
    rows = []
    for case in Case:
        try:
            xs = [sample_case(case, cap, rng, xi_max, max_tries=20000)
                  for _ in range(sample_count)]
        except RuntimeError:
            # the region can be empty when the dilated cap is wide (large delta)
            rows.append({"case": case.value, "samples": 0, "max_ratio": float("nan"),
                         "slope": float("nan"), "bound": names[case], "delta": delta,
                         "epsilon": epsilon})
            continue
        k = np.array([abs(multiplier_eval(x, cap, epsilon)) for x in xs])
        bnd = np.array([case_bound(case, x, delta, epsilon) for x in xs])
        r = np.linalg.norm(xs, axis=1)
        slope = _loglog_envelope_slope(r, k) if case in (Case.FAR_ALIGNED, Case.FAR_OFF_SHELL,
                                                         Case.FAR_ON_SHELL) else float("nan")
        rows.append({"case": case.value, "samples": sample_count,
                     "max_ratio": float(np.max(k / bnd)), "slope": slope,
                     "bound": names[case], "delta": delta, "epsilon": epsilon})
    return rows


# -------------------------------------------------- Hoelder / shell integral

def _direction_set(n: int = 26) -> np.ndarray:
    d = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)
                  if (i, j, k) != (0, 0, 0)], dtype=float)
    return _unit(d)


def holder_seminorm(phi, alpha: float, points, levels: int = 8, directions=None) -> np.ndarray:
    """Pointwise [phi]_alpha(xi) = sup_{|h|<=1} |phi(xi) - phi(xi+h)| / |h|^alpha,
    the sup taken over h = r u with r in {1, 1/2, ..., 2^-(levels-1)} and u in a
    fixed symmetric direction set augmented by the radial directions +/- xi/|xi|."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if levels < 1:
        raise ValueError("insufficient sampling: need at least one radius level")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    dirs = _direction_set() if directions is None else _unit(directions)
    base = np.asarray(phi(pts))
    out = np.zeros(len(pts))
    nrm = np.linalg.norm(pts, axis=1, keepdims=True)
    radial = np.where(nrm > 0, pts / np.where(nrm > 0, nrm, 1.0), np.array([0.0, 0.0, 1.0]))
    for lev in range(levels):
        r = 2.0 ** -lev
        for u in list(dirs) + [radial, -radial]:
            q = np.abs(base - np.asarray(phi(pts + r * u))) / r ** alpha
            np.maximum(out, q, out=out)
    return out


def pv_shell_parts(phi, lam: float, degree: int = 48, n_radial: int = 48):
    """(surface, pv) with surface = int_{lam S^2} phi dsigma and
    pv = P.V. int_{lam-1<|xi|<lam+1} phi(xi)/(lam - |xi|) dxi, paired over radii lam -/+ t."""
    if not lam > 1:
        raise ValueError("lambda must exceed 1 so the shell avoids the origin")
    if n_radial < 8:
        raise ValueError("insufficient radial resolution")
    rule = make_sphere_rule(degree)
    th = rule.nodes
    surf = lam ** 2 * np.sum(rule.weights * np.asarray(phi(lam * th)))
    x, wx = np.polynomial.legendre.leggauss(n_radial)
    t = 0.5 * (x + 1.0)
    wt = 0.5 * wx
    pv = 0j
    for ti, wi in zip(t, wt):
        lo, hi = lam - ti, lam + ti
        g = lo ** 2 * np.asarray(phi(lo * th)) - hi ** 2 * np.asarray(phi(hi * th))
        pv += wi * np.sum(rule.weights * g) / ti
    return complex(surf), complex(pv)


def pv_shell_integral(phi, lam: float, degree: int = 48, n_radial: int = 48) -> complex:
    """int phi [dsigma_{lam S^2} + i P.V. dxi/(lam - |xi|)] over the shell lam-1<|xi|<lam+1."""
    s, p = pv_shell_parts(phi, lam, degree, n_radial)
    return s + 1j * p


def shell_bound_terms(phi, lam: float, alpha: float = 0.5, degree: int = 48) -> tuple[float, float]:
    """(||phi||_{L1(lam S^2)}, ||[phi]_alpha||_{L1(lam S^2)})."""
    rule = make_sphere_rule(degree)
    pts = lam * rule.nodes
    l1 = lam ** 2 * float(np.sum(rule.weights * np.abs(phi(pts))))
    hs = lam ** 2 * float(np.sum(rule.weights * holder_seminorm(phi, alpha, pts)))
    return l1, hs


# ------------------------------------------------------ cone resolvents

def random_shell_function(rng: np.random.Generator, lam: float, max_bumps: int = 4):
    """Random smooth test function concentrated near lam S^2: 1 to max_bumps
    Gaussian bumps (widths 0.3 to 2) times a plane wave e^{i x.q}."""
    k = int(rng.integers(1, max_bumps + 1))
    cs = rng.standard_normal((k, 3))
    cs = lam * cs / np.linalg.norm(cs, axis=1)[:, None] * rng.uniform(0.8, 1.2, (k, 1))
    ws = rng.uniform(0.3, 2.0, k)
    amps = rng.standard_normal(k) + 1j * rng.standard_normal(k)
    q = 0.5 * rng.standard_normal(3)

    def phi(x):
        x = np.asarray(x, dtype=float)
        out = 0j
        for c, w, a in zip(cs, ws, amps):
            out = out + a * np.exp(-np.sum((x - c) ** 2, -1) / w ** 2)
        return out * np.exp(1j * (x @ q))
    return phi


def _cell_average_nodes(m: int) -> np.ndarray:
    o = (np.arange(m) + 0.5) / m - 0.5
    return np.stack(np.meshgrid(o, o, o, indexing="ij"), -1).reshape(-1, 3)


class ConeKernel:
    """Tabulated cone-cut kernel on the doubled lattice, applied as an aperiodic
    zero-padded convolution.

    kind = "scalar":  chi(x^) G(x), where G are the lattice weights of the
                      whole-space kernel e^{(i lam - eps)|x|}/(4 pi |x|) for
                      band-limited sources; the origin weight is shared out in
                      proportion to the cap mass, so that a full cap, or the sum
                      over a partition, reproduces R0 exactly.
    kind = "grad":    gradient of chi(x^) e^{kappa r}/(4 pi r) (three components),
                      cell-averaged within `avg_radius` of the origin.
    radial in {None, "near", "far"} multiplies by a smooth radial cutoff at rho.
    """

    def __init__(self, grid: GridSpec, lam: float, cap, epsilon: float = 0.0,
                 kind: str = "scalar", radial: str | None = None, rho: float | None = None,
                 sub: int = 6):
        self.grid = grid
        self.n = grid.n
        h = grid.spacing
        self.kappa = 1j * lam - epsilon
        self._cap, self._kind, self._radial, self._rho = cap, kind, radial, rho
        big = make_grid(2 * grid.n, 2 * grid.box_half_width)
        P = np.stack(np.broadcast_arrays(*big.coords()), -1)
        r = np.sqrt(big.r2())
        if kind == "scalar":
            vals = self._scalar_table(grid, lam, epsilon, P, r)
        else:
            vals = self._eval(P, r)
            delta_eff = min(getattr(cap, "radius", np.pi), np.pi)
            avg_radius = max(3 * h, 4 * h / delta_eff)
            offs = _cell_average_nodes(sub) * h
            for idx in np.argwhere(r < avg_radius):
                q = P[tuple(idx)][None, :] + offs
                rq = np.linalg.norm(q, axis=1)
                vals[(slice(None),) + tuple(idx)] = self._eval(q, rq).mean(axis=-1)
        self.hat = sfft.fftn(vals, axes=(-3, -2, -1), workers=_grid.FFT_WORKERS) * h ** 3
        self.components = vals.shape[0]

    def _scalar_table(self, grid, lam, epsilon, P, r):
        from .resolvent import free_space_kernel
        fk = free_space_kernel(grid, complex(lam, epsilon))
        G = sfft.ifftn(fk.hat, workers=_grid.FFT_WORKERS) / grid.spacing ** 3
        with np.errstate(divide="ignore", invalid="ignore"):
            om = P / r[..., None]
        om[0, 0, 0] = (0.0, 0.0, 1.0)
        chi = self._cap.chi(om)
        chi[0, 0, 0] = cap_mass(self._cap) / (4.0 * np.pi)
        out = chi * G
        if self._radial is not None:
            out = out * _radial_cut(r, self._rho, self._radial)[0]
        return out[None]

    def _eval(self, P, r):
        cap = self._cap
        with np.errstate(divide="ignore", invalid="ignore"):
            om = P / r[..., None]
            om = np.where(r[..., None] > 0, om, np.array([0.0, 0.0, 1.0]))
            chi = cap.chi(om)
            g = np.exp(self.kappa * r) / (4 * np.pi * r)
            rad, drad = 1.0, 0.0
            if self._radial is not None:
                rad, drad = _radial_cut(r, self._rho, self._radial)
            dg = g * (self.kappa - 1.0 / r)
            tang = cap.grad_chi(om) / r[..., None]
            vec = ((chi * (dg * rad + g * drad))[..., None] * om
                   + (g * rad)[..., None] * tang)
            out = np.moveaxis(vec, -1, 0)
        out = np.where(np.isfinite(out), out, 0.0)
        return out.astype(complex)

    def apply(self, f: np.ndarray, component: int | None = None, adjoint: bool = False) -> np.ndarray:
        """Convolve f (n^3) with one component (or every component) of the kernel."""
        n = self.n
        pad = np.zeros((2 * n,) * 3, dtype=complex)
        pad[:n, :n, :n] = np.fft.fftshift(f)
        fh = sfft.fftn(pad, workers=_grid.FFT_WORKERS)
        comps = range(self.components) if component is None else [component]
        outs = []
        for c in comps:
            kh = np.conj(self.hat[c]) if adjoint else self.hat[c]
            out = sfft.ifftn(fh * kh, workers=_grid.FFT_WORKERS)
            outs.append(np.fft.ifftshift(out[:n, :n, :n]))
        return outs[0] if component is not None else np.stack(outs)

    def apply_many(self, fs, adjoint: bool = False) -> np.ndarray:
        """sum_c K_c * f_c for a vector field f (component-wise kernels)."""
        n = self.n
        acc = None
        for c in range(self.components):
            pad = np.zeros((2 * n,) * 3, dtype=complex)
            pad[:n, :n, :n] = np.fft.fftshift(fs[c])
            kh = np.conj(self.hat[c]) if adjoint else self.hat[c]
            t = sfft.fftn(pad, workers=_grid.FFT_WORKERS) * kh
            acc = t if acc is None else acc + t
        out = sfft.ifftn(acc, workers=_grid.FFT_WORKERS)
        return np.fft.ifftshift(out[:n, :n, :n])


def _radial_cut(r, rho, which):
    """Smooth cutoff equal to 1 on r < rho/2 and 0 on r > rho (and its derivative)."""
    t = np.clip((r - 0.5 * rho) / (0.5 * rho), 0.0, 1.0)
    # C^2 quintic step
    s = t ** 3 * (10 - 15 * t + 6 * t * t)
    ds = 30 * t ** 2 * (1 - t) ** 2 / (0.5 * rho)
    if which == "near":
        return 1.0 - s, -ds
    return s, ds


_CONE_CACHE: "OrderedDict[tuple, ConeKernel]" = OrderedDict()
CONE_CACHE_BYTES = 1.2e9


def _cap_key(cap):
    if isinstance(cap, PartitionCap):
        return ("p", id(cap.partition), cap.index)
    return ("c", cap.center, cap.radius, cap.order)


def cone_kernel(grid, lam, cap, epsilon=0.0, kind="scalar", radial=None, rho=None) -> ConeKernel:
    key = (grid, float(lam), _cap_key(cap), float(epsilon), kind, radial, rho)
    k = _CONE_CACHE.get(key)
    if k is not None:
        _CONE_CACHE.move_to_end(key)
        return k
    k = ConeKernel(grid, lam, cap, epsilon, kind, radial, rho)
    _CONE_CACHE[key] = k
    total = sum(v.hat.nbytes for v in _CONE_CACHE.values())
    while total > CONE_CACHE_BYTES and len(_CONE_CACHE) > 1:
        _, old = _CONE_CACHE.popitem(last=False)
        total -= old.hat.nbytes
    return k


def clear_cone_cache():
    _CONE_CACHE.clear()


def _check_lambda(grid, lam):
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if lam > grid.frequency_cutoff / 1.2:
        raise ValueError(f"lambda={lam} too close to k_max={grid.frequency_cutoff:.2f}")


def cone_resolvent_apply(f: np.ndarray, grid: GridSpec, lam: float, cap, epsilon: float = 0.0,
                         adjoint: bool = False) -> np.ndarray:
    """R_S f: convolution with chi_S(x^) e^{(i lam - eps)|x|} / (4 pi |x|)."""
    _check_lambda(grid, lam)
    return cone_kernel(grid, lam, cap, epsilon).apply(np.asarray(f), 0, adjoint)


def two_cone_operator(m: PotentialModel, cap1, cap2, lam: float, epsilon: float = 0.0,
                      sigma_weight: float = 4.5) -> LinOp:
    """w R_S1 sum_j d_j A_j R_S2 d_j w and its adjoint (derivatives spectral)."""
    g = m.grid
    _check_lambda(g, lam)
    w = weight(g, -sigma_weight)
    k1 = cone_kernel(g, lam, cap1, epsilon)
    k2 = cone_kernel(g, lam, cap2, epsilon)
    ks = g.freqs()

    def fwd(f):
        fh = fftn(w * f)
        acc = 0
        for j in range(3):
            u = k2.apply(ifftn(1j * ks[j] * fh), 0)
            acc = acc + 1j * ks[j] * fftn(m.A[j] * u)
        return w * k1.apply(ifftn(acc), 0)

    def adj(gf):
        v = k1.apply(w * gf, 0, adjoint=True)
        vh = fftn(v)
        acc = 0
        for j in range(3):
            u = m.A[j] * ifftn(-1j * ks[j] * vh)
            u = k2.apply(u, 0, adjoint=True)
            acc = acc - 1j * ks[j] * fftn(u)
        return w * ifftn(acc)

    return LinOp(fwd, adj, g)


def two_cone_composition_norm(m: PotentialModel, cap1, cap2, lam: float, epsilon: float = 0.0,
                              sigma_weight: float = 4.5, tol: float = 1e-3, max_iter: int = 40,
                              delta: float | None = None, seed: int = 0) -> NormEstimate:
    """Power-iteration norm of w R_S1 div A R_S2 grad w for separated caps."""
    if delta is None:
        delta = cap1.radius
    sep = float(geodesic(cap1.c, cap2.c))
    if not sep > 5 * delta - 1e-12 and not sep >= np.pi - 1e-12:
        raise ValueError(f"cap separation {sep:.3f} does not exceed 5 delta = {5 * delta:.3f}")
    if not lam > delta ** -2:
        raise ValueError(f"lambda={lam} must exceed delta^-2 = {delta ** -2:.3f}")
    if m.is_zero or not m.has_magnetic:
        return NormEstimate(0.0, 0, 0.0, True)
    op = two_cone_operator(m, cap1, cap2, lam, epsilon, sigma_weight)
    return op_norm_estimate(op, tol=tol, max_iter=max_iter, seed=seed)


class ChainKind(str, Enum):
    DIRECTED = "Directed"
    UNDIRECTED = "Undirected"


@dataclass(frozen=True)
class Chain:
    caps: tuple
    classification: ChainKind


def classify_chain(chain, partition: CapPartition, tol: float = 1e-12) -> Chain:
    """Directed iff every consecutive centre distance is <= 5 delta."""
    idx = tuple(int(i) for i in chain)
    n = len(partition)
    if any(i < 0 or i >= n for i in idx):
        raise IndexError("cap index out of range")
    lim = 5.0 * partition.delta
    ok = all(float(geodesic(partition.centers[a], partition.centers[b])) <= lim + tol
             for a, b in zip(idx[:-1], idx[1:]))
    return Chain(idx, ChainKind.DIRECTED if ok else ChainKind.UNDIRECTED)


@dataclass
class SplitOps:
    near: LinOp
    far: LinOp
    full: LinOp
    near_norm: NormEstimate | None = None
    far_norm: NormEstimate | None = None


def _vector_op(kern: ConeKernel, w: np.ndarray, grid: GridSpec) -> LinOp:
    """Scalar -> vector operator w (K * (w f)) with a 3-component kernel."""
    def fwd(f):
        return w[None] * kern.apply(w * f)

    def adj(v):
        return w * kern.apply_many(w[None] * v, adjoint=True)
    return LinOp(fwd, adj, grid)


def near_far_split(grid: GridSpec, cap, rho: float, lam: float, epsilon: float = 0.0,
                   sigma_weight: float = 4.5, delta: float | None = None,
                   estimate: bool = True, tol: float = 1e-3, max_iter: int = 40,
                   check_lambda: bool = True) -> SplitOps:
    """Q0 = w (grad R_S) chi(|x-y| < rho) w and Q1 = the remainder."""
    if rho < 2 * grid.spacing:
        raise ValueError(f"rho={rho} is below two grid spacings ({2 * grid.spacing:.3f})")
    if delta is None:
        delta = min(cap.radius, 1.0)
    if check_lambda and not lam > delta ** -2 / rho:
        raise ValueError(f"lambda={lam} must exceed delta^-2 rho^-1 = {delta ** -2 / rho:.2f}")
    _check_lambda(grid, lam)
    w = weight(grid, -sigma_weight)
    near = _vector_op(cone_kernel(grid, lam, cap, epsilon, "grad", "near", rho), w, grid)
    far = _vector_op(cone_kernel(grid, lam, cap, epsilon, "grad", "far", rho), w, grid)
    full = _vector_op(cone_kernel(grid, lam, cap, epsilon, "grad"), w, grid)
    out = SplitOps(near, far, full)
    if estimate:
        rng = np.random.default_rng(0)
        start = rng.standard_normal(grid.shape) + 0j
        out.near_norm = op_norm_estimate(near, tol=tol, max_iter=max_iter, start=start)
        out.far_norm = op_norm_estimate(far, tol=tol, max_iter=max_iter, start=start)
    return out


# ---------------------------------------------------------- power scans

def power_operator(m: PotentialModel, lam: float, m_order: int, sigma_weight: float = 4.5,
                   main_term: bool = False, branch=Branch.PLUS) -> LinOp:
    """w (R0 L)^m w^-1 (or the (2i)^m (R0 div A)^m main term) with its adjoint."""
    g = m.grid
    w = weight(g, -sigma_weight)
    winv = weight(g, sigma_weight)
    ks = g.freqs()
    from .resolvent import conj_branch

    def L_op(u):
        if main_term:
            return 2j * ifftn(sum(1j * ks[j] * fftn(m.A[j] * u) for j in range(3)))
        return apply_L_array(m, u, "divergence")

    def L_adj(u):
        # exact grid adjoints: (2i div A .)* = 2i A.grad and (-i div A)* = i div A,
        # so the divergence form is adjoint to the gradient form
        if main_term:
            uh = fftn(u)
            return 2j * sum(m.A[j] * ifftn(1j * ks[j] * uh) for j in range(3))
        return apply_L_array(m, u, "gradient")

    def fwd(f):
        u = winv * f
        for _ in range(m_order):
            u = resolvent_apply(L_op(u), g, lam, 0.0, branch)
        return w * u

    def adj(f):
        u = w * f
        for _ in range(m_order):
            u = L_adj(resolvent_apply(u, g, lam, 0.0, conj_branch(branch)))
        return winv * u

    return LinOp(fwd, adj, g)


def power_norm_scan(m: PotentialModel, m_order: int, lambda_list, sigma_weight: float = 4.5,
                    tol: float = 1e-3, box_half_width: float | None = None, k_ratio: float = 1.5,
                    max_iter: int = 40, main_term: bool = True, seed: int = 0) -> list:
    """Rows (lambda, m, norm, main_norm, iterations, residual) for
    ||w (R0(lambda^2+i0) L)^m w^-1||; main_norm is the (2i)^m (R0 div A)^m part."""
    if not sigma_weight > 4:
        raise ValueError("sigma_weight must exceed 4")
    if m_order < 1:
        raise ValueError("m_order must be >= 1")
    L = m.grid.box_half_width if box_half_width is None else box_half_width
    rows = []
    for lam in sorted(float(x) for x in lambda_list):
        g = grid_for_lambda(lam, L, k_ratio, h_max=m.grid.spacing)
        mm = m.regrid(g)
        row = {"lambda": lam, "m": int(m_order), "n": g.n}
        try:
            if mm.is_zero:
                row.update(norm=0.0, main_norm=0.0, iterations=0, residual=0.0, status="ok")
            else:
                est = op_norm_estimate(power_operator(mm, lam, m_order, sigma_weight),
                                       tol=tol, max_iter=max_iter, seed=seed)
                row.update(norm=est.value, iterations=est.iterations, residual=est.residual,
                           status="ok")
                if main_term:
                    e2 = op_norm_estimate(power_operator(mm, lam, m_order, sigma_weight, True),
                                          tol=tol, max_iter=max_iter, seed=seed)
                    row["main_norm"] = e2.value
                else:
                    row["main_norm"] = float("nan")
        except Exception as exc:
            log.warning("power_norm_scan failed at lambda=%s: %s", lam, exc)
            row.update(norm=float("nan"), main_norm=float("nan"), iterations=0,
                       residual=float("nan"), status=f"error: {exc}")
        rows.append(row)
    return rows


# ----------------------------------------------------------- chain budget

def chain_budget_report(delta: float, m_max: int, c6: float = 10.0, c3: float = 10.0,
                        c5: float = 10.0, target: float = 0.5, rho_rule=None) -> dict:
    """Evaluate the directed-chain bound expressions for m = 1..m_max.

    Per m: far = C3^m / (m! rho^m), gen = C5^m m^(-m/16),
    total = delta^-2 C6^m m^(-m/16), with rho = rho_rule(m) (default m^(-1/8)).
    `first_m_below_target` is the smallest m with total < target (None if none).
    `delta` may be a number or a callable of m.
    """
    if rho_rule is None:
        rho_rule = lambda m: m ** -0.125
    rows = []
    first = None
    for m in range(1, int(m_max) + 1):
        d = delta(m) if callable(delta) else float(delta)
        rho = rho_rule(m)
        decay = m ** (-m / 16.0)
        row = {"m": m, "delta": d, "rho": rho,
               "far": c3 ** m / (math.factorial(m) * rho ** m),
               "gen": c5 ** m * decay,
               "total": d ** -2 * c6 ** m * decay}
        if first is None and row["total"] < target:
            first = m
        rows.append(row)
    return {"c3": c3, "c5": c5, "c6": c6, "first_m_below_target": first, "rows": rows,
            "target": target}


def log_total(m: int, delta: float, c6: float) -> float:
    """log of delta^-2 C6^m m^(-m/16), usable where the plain value overflows."""
    return -2 * math.log(delta) + m * math.log(c6) - (m / 16.0) * math.log(m)
