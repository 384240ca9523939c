"""Rotationally symmetric densities on R^r stored as radial profiles."""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson
from scipy.interpolate import CubicSpline, PchipInterpolator

FULL = "full"
HALF = "half"


class SupportEscape(ArithmeticError):
    pass


class TailTruncated(UserWarning):
    pass


def sphere_area(d: int) -> float:
    """Surface area of the unit sphere S^{d-1} in R^d (S^0 has two points)."""
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


@dataclass(frozen=True)
class RadialGrid:
    """Uniform nodes x_i = x_min + i*h, i = 0..m-1.

    The default x_min = 0 is the plain grid from the origin.  A positive
    x_min describes a window around a thin shell; the profile is taken to
    vanish outside [x_min, x_max].
    """

    h: float
    m: int
    x_min: float = 0.0

    def __post_init__(self):
        if self.m < 64:
            raise ValueError("radial grid needs at least 64 nodes")
        if not self.h > 0:
            raise ValueError("grid spacing must be positive")
        if self.x_min < 0:
            raise ValueError("grid must start at x >= 0")

    @classmethod
    def from_xmax(cls, x_max: float, m: int) -> "RadialGrid":
        return cls(h=x_max / (m - 1), m=m)

    @property
    def x_max(self) -> float:
        return self.x_min + (self.m - 1) * self.h

    @property
    def nodes(self) -> np.ndarray:
        return self.x_min + self.h * np.arange(self.m)


@dataclass(frozen=True)
class RadialDensity:
    grid: RadialGrid
    values: np.ndarray
    r: int
    mode: str = FULL

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.m,):
            raise ValueError("values do not match grid")
        if self.r < 2:
            raise ValueError("spin dimension must be >= 2")
        if self.mode not in (FULL, HALF):
            raise ValueError(f"unknown normalization mode {self.mode!r}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def x(self) -> np.ndarray:
        return self.grid.nodes

    def normalized(self) -> "RadialDensity":
        mass = mass_full(self) if self.mode == FULL else halfline_mass(self)
        return RadialDensity(self.grid, self.values / mass, self.r, self.mode)


def _integrate(y: np.ndarray, h: float) -> float:
    return float(simpson(y, dx=h))


def mass_full(d: RadialDensity) -> float:
    x = d.x
    return sphere_area(d.r) * _integrate(x ** (d.r - 1) * d.values, d.grid.h)


def moment_full(d: RadialDensity, k: float) -> float:
    """E|x|^k over R^r (unnormalized: divides by nothing)."""
    if k < 0:
        raise ValueError("moment order must be >= 0")
    x = d.x
    integrand = x ** (k + d.r - 1) * d.values
    total = sphere_area(d.r) * _integrate(integrand, d.grid.h)
    # tail segment: outer tenth of the stretch between the peak and x_max
    peak = int(np.argmax(d.values))
    cut = min(d.grid.m - 3, peak + int(0.9 * (d.grid.m - 1 - peak)))
    last = sphere_area(d.r) * _integrate(integrand[cut:], d.grid.h)
    if total != 0 and abs(last) > 1e-6 * abs(total):
        warnings.warn(f"last decade holds {last / total:.2e} of moment {k}", TailTruncated)
    return total


def halfline_mass(d: RadialDensity) -> float:
    return _integrate(d.values, d.grid.h)


def halfline_mean(d: RadialDensity) -> float:
    return _integrate(d.x * d.values, d.grid.h)


def interpolate(d: RadialDensity, x) -> np.ndarray | float:
    """Monotone cubic (PCHIP) interpolation, zero outside the grid, clamped >= 0."""
    xq = np.asarray(x, dtype=float)
    if np.any(xq < 0):
        raise ValueError("radial argument must be >= 0")
    f = PchipInterpolator(d.x, d.values, extrapolate=False)
    out = np.nan_to_num(f(xq), nan=0.0)
    out = np.where((xq < d.grid.x_min) | (xq > d.grid.x_max), 0.0, np.maximum(out, 0.0))
    return float(out) if out.ndim == 0 else out


def log_spline(d: RadialDensity, floor: float = 0.0) -> tuple[CubicSpline, float, float]:
    """Cubic spline of log(values) over the positive window.

    Returns (spline, lo, hi).  Log-space interpolation keeps the profile
    positive and reproduces Gaussians exactly; when the window starts at
    the origin the even extension is used so the spline has zero slope there.
    """
    vals = d.values
    vmax = vals.max()
    pos = np.nonzero(vals > max(floor * vmax, 1e-300))[0]
    if pos.size < 4:
        raise ValueError("profile has fewer than four positive nodes")
    i0, i1 = pos[0], pos[-1]
    x = d.x[i0:i1 + 1]
    y = np.log(np.maximum(vals[i0:i1 + 1], 1e-300))
    if i0 == 0 and d.grid.x_min == 0.0:
        k = min(4, x.size - 1)
        x = np.concatenate((-x[k:0:-1], x))
        y = np.concatenate((y[k:0:-1], y))
    return CubicSpline(x, y), float(d.x[i0]), float(d.x[i1])


def regrid(d: RadialDensity, new_grid: RadialGrid, loss_tol: float = 1e-8) -> RadialDensity:
    if new_grid == d.grid:
        return RadialDensity(new_grid, d.values.copy(), d.r, d.mode)
    old_mass = mass_full(d) if d.mode == FULL else halfline_mass(d)
    if old_mass <= 0:
        raise SupportEscape("cannot regrid an empty profile")
    spl, lo, hi = log_spline(d)
    xn = new_grid.nodes
    inside = (xn >= lo) & (xn <= hi)
    vals = np.zeros(new_grid.m)
    vals[inside] = np.exp(spl(xn[inside]))
    out = RadialDensity(new_grid, vals, d.r, d.mode)
    new_mass = mass_full(out) if d.mode == FULL else halfline_mass(out)
    loss = (old_mass - new_mass) / old_mass
    if loss > loss_tol:
        raise SupportEscape(f"regrid lost {loss:.3e} of the mass")
    return out.normalized()


def to_csv(d: RadialDensity) -> str:
    buf = io.StringIO()
    buf.write("x,value\n")
    for xi, vi in zip(d.x, d.values):
        buf.write(f"{xi:.17g},{vi:.17g}\n")
    return buf.getvalue()


def from_csv(text: str, r: int, mode: str = FULL) -> RadialDensity:
    arr = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1, ndmin=2)
    x, v = arr[:, 0], arr[:, 1]
    h = (x[-1] - x[0]) / (len(x) - 1)
    return RadialDensity(RadialGrid(h=h, m=len(x), x_min=float(x[0])), v, r, mode)
