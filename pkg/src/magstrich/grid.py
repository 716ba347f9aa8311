"""Uniform periodic 3D grid, unitary FFTs, weights and Sobolev multipliers.

Arrays are stored in FFT order along every axis: index 0 is the origin and
coordinates use the minimal-image convention, so the box is [-L, L)^3.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

# Worker count handed to scipy.fft; the CLI may raise it.
FFT_WORKERS = 1


def set_fft_workers(n: int) -> None:
    global FFT_WORKERS
    FFT_WORKERS = max(1, int(n))


def fftn(a: np.ndarray, axes=None) -> np.ndarray:
    return sfft.fftn(a, axes=axes, norm="ortho", workers=FFT_WORKERS)


def ifftn(a: np.ndarray, axes=None) -> np.ndarray:
    return sfft.ifftn(a, axes=axes, norm="ortho", workers=FFT_WORKERS)


@dataclass(frozen=True)
class GridSpec:
    n: int
    box_half_width: float

    @property
    def spacing(self) -> float:
        return 2.0 * self.box_half_width / self.n

    @property
    def frequency_cutoff(self) -> float:
        return np.pi / self.spacing

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n)

    @property
    def cell_volume(self) -> float:
        return self.spacing ** 3

    # cached geometry, shared between equal grids
    def axis(self) -> np.ndarray:
        return _axis(self.n, self.box_half_width)

    def freq_axis(self) -> np.ndarray:
        return _freq_axis(self.n, self.box_half_width)

    def coords(self):
        """Broadcastable minimal-image coordinates (x, y, z)."""
        a = self.axis()
        return a[:, None, None], a[None, :, None], a[None, None, :]

    def freqs(self):
        k = self.freq_axis()
        return k[:, None, None], k[None, :, None], k[None, None, :]

    def r2(self) -> np.ndarray:
        return _r2(self.n, self.box_half_width)

    def k2(self) -> np.ndarray:
        return _k2(self.n, self.box_half_width)

    def to_dict(self) -> dict:
        return {"n": self.n, "box_half_width": self.box_half_width}


@lru_cache(maxsize=16)
def _axis(n, L):
    h = 2.0 * L / n
    a = np.fft.fftfreq(n, d=1.0 / n) * h
    a.setflags(write=False)
    return a


@lru_cache(maxsize=16)
def _freq_axis(n, L):
    h = 2.0 * L / n
    k = 2.0 * np.pi * np.fft.fftfreq(n, d=h)
    k.setflags(write=False)
    return k


@lru_cache(maxsize=8)
def _r2(n, L):
    a = _axis(n, L)
    r2 = a[:, None, None] ** 2 + a[None, :, None] ** 2 + a[None, None, :] ** 2
    r2.setflags(write=False)
    return r2


@lru_cache(maxsize=8)
def _k2(n, L):
    k = _freq_axis(n, L)
    k2 = k[:, None, None] ** 2 + k[None, :, None] ** 2 + k[None, None, :] ** 2
    k2.setflags(write=False)
    return k2


def make_grid(n: int, box_half_width: float) -> GridSpec:
    n = int(n)
    if n < 8 or n & (n - 1):
        raise ValueError("n must be a power of two (and at least 8)")
    if not box_half_width > 0:
        raise ValueError("box_half_width must be positive")
    return GridSpec(n, float(box_half_width))


class Side(str, Enum):
    POSITION = "position"
    FREQUENCY = "frequency"


@dataclass
class Field:
    grid: GridSpec
    values: np.ndarray
    side: Side = Side.POSITION

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} does not match grid {self.grid.shape}")
        self.side = Side(self.side)

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy(), self.side)

    def position(self) -> np.ndarray:
        """Position-side values (transforming if needed)."""
        if self.side is Side.POSITION:
            return self.values
        return ifftn(self.values)

    def norm(self) -> float:
        return float(np.sqrt(np.vdot(self.values, self.values).real * self.grid.cell_volume))


def as_array(f, grid: GridSpec | None = None) -> np.ndarray:
    """Position-side complex array for a Field or raw array."""
    if isinstance(f, Field):
        return f.position()
    a = np.asarray(f)
    if grid is not None and a.shape != grid.shape:
        raise ValueError("array shape does not match grid")
    return a


def like(template, values: np.ndarray, grid: GridSpec | None = None):
    """Wrap values as a position Field when the template was a Field."""
    if isinstance(template, Field):
        return Field(template.grid, values, Side.POSITION)
    return values


def transform(f: Field, target_side) -> Field:
    target_side = Side(target_side)
    if f.side is target_side:
        return f
    if target_side is Side.FREQUENCY:
        return Field(f.grid, fftn(f.values), Side.FREQUENCY)
    return Field(f.grid, ifftn(f.values), Side.POSITION)


def japanese(r2, power: float):
    """<x>^power = (1 + r2)^(power/2)."""
    return (1.0 + r2) ** (0.5 * power)


@lru_cache(maxsize=16)
def _weight(n, L, tau):
    w = japanese(_r2(n, L), tau)
    w.setflags(write=False)
    return w


def weight(grid: GridSpec, tau: float) -> np.ndarray:
    """<x>^tau sampled with minimal-image coordinates."""
    return _weight(grid.n, grid.box_half_width, float(tau))


def weight_apply(f: Field, tau: float) -> Field:
    if f.side is not Side.POSITION:
        raise ValueError("weight_apply needs a position-side field")
    return Field(f.grid, f.values * weight(f.grid, tau), Side.POSITION)


@lru_cache(maxsize=16)
def _bessel_symbol(n, L, alpha):
    s = japanese(_k2(n, L), alpha)
    s.setflags(write=False)
    return s


def bessel_symbol(grid: GridSpec, alpha: float) -> np.ndarray:
    """<xi>^alpha on the frequency lattice."""
    return _bessel_symbol(grid.n, grid.box_half_width, float(alpha))


def sobolev_array(a: np.ndarray, grid: GridSpec, alpha: float) -> np.ndarray:
    if alpha == 0:
        return a
    return ifftn(fftn(a) * bessel_symbol(grid, alpha))


def sobolev_apply(f: Field, alpha: float) -> Field:
    side = f.side
    g = transform(f, Side.FREQUENCY)
    g = Field(f.grid, g.values * bessel_symbol(f.grid, alpha), Side.FREQUENCY)
    return transform(g, side)


def l2_norm(a: np.ndarray, grid: GridSpec) -> float:
    return float(np.sqrt(np.vdot(a, a).real * grid.cell_volume))


def inner(a: np.ndarray, b: np.ndarray, grid: GridSpec) -> complex:
    """<a, b> = sum conj(a) b h^3."""
    return complex(np.vdot(a, b) * grid.cell_volume)


def weighted_norm(f: Field, tau: float) -> float:
    a = f.position()
    return l2_norm(a * weight(f.grid, tau), f.grid)


def gradient(a: np.ndarray, grid: GridSpec, hat: np.ndarray | None = None):
    """Spectral gradient, returned as a list of three arrays."""
    if hat is None:
        hat = fftn(a)
    return [ifftn(1j * k * hat) for k in grid.freqs()]


def divergence(vec, grid: GridSpec) -> np.ndarray:
    out = None
    for k, v in zip(grid.freqs(), vec):
        term = 1j * k * fftn(v)
        out = term if out is None else out + term
    return ifftn(out)


def laplacian(a: np.ndarray, grid: GridSpec) -> np.ndarray:
    return ifftn(-grid.k2() * fftn(a))


def natural_order(a: np.ndarray) -> np.ndarray:
    """FFT-ordered array -> ascending coordinates (x from -L upward)."""
    return np.fft.fftshift(a)


def fft_order(a: np.ndarray) -> np.ndarray:
    return np.fft.ifftshift(a)


def random_field(grid: GridSpec, rng: np.random.Generator, band: float | None = None,
                 envelope: float | None = None) -> np.ndarray:
    """Random complex field, optionally band-limited to |xi| < band and
    multiplied by a Gaussian envelope exp(-|x|^2 / envelope^2)."""
    a = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    if band is not None:
        a = ifftn(fftn(a) * (grid.k2() < band ** 2))
    if envelope is not None:
        a = a * np.exp(-grid.r2() / envelope ** 2)
    return a / l2_norm(a, grid)
