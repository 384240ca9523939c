"""Non-Gaussian fixed point g(t) of the radial fluctuation map.

In Fourier variables the renormalized map reads

    G(xi) <- N[ exp(i (r-1) xi / 4) G(xi/2)^2 (1 + i xi / 2)^{-(r-1)/2} ],

with N restoring G(0) = 1 and the mean -(r-1)/4.  G(xi/2) is obtained on
the grid without interpolation: it is the transform of 2 g(2s), and g(2s)
on the t-grid is just every other sample of g.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import minimize_scalar


class NoConvergence(ArithmeticError):
    pass


class NegativeDensity(ArithmeticError):
    pass


class FitWindowTooNarrow(ValueError):
    pass


class TiltOverflow(ArithmeticError):
    pass


@dataclass(frozen=True)
class FrequencyGrid:
    n: int = 2 ** 14
    xi_max: float = 256.0

    @property
    def dxi(self) -> float:
        return 2 * self.xi_max / self.n

    @property
    def dt(self) -> float:
        return 2 * math.pi / (self.n * self.dxi)

    @property
    def xi(self) -> np.ndarray:
        """Frequencies in FFT order."""
        return 2 * math.pi * np.fft.fftfreq(self.n, d=self.dt)

    @property
    def t(self) -> np.ndarray:
        return (np.arange(self.n) - self.n // 2) * self.dt


@dataclass
class FixedPointSolution:
    r: int
    grid: FrequencyGrid
    t: np.ndarray
    g: np.ndarray
    G: np.ndarray
    cumulants: dict
    residual: float
    iterations: int
    mean_shift: float
    history: list = field(default_factory=list)
    left_rate: float | None = None
    right_shape: dict | None = None

    def spline(self) -> CubicSpline:
        return CubicSpline(self.t, self.g)

    def __call__(self, t):
        """g at arbitrary points; tails use the contour-shifted integral."""
        t = np.asarray(t, dtype=float)
        out = np.asarray(self.spline()(t), dtype=float)
        far = np.abs(t) > 4.0
        if np.any(far):
            out = out.copy()
            out[far] = [tail_value(self, float(s)) for s in np.atleast_1d(t)[far]]
        return out

    def metadata(self) -> dict:
        return {
            "r": self.r, "n_freq": self.grid.n, "xi_max": self.grid.xi_max,
            "cumulants": self.cumulants, "residual": self.residual,
            "iterations": self.iterations, "mean": self.mean_shift,
            "left_rate": self.left_rate, "right_shape": self.right_shape,
        }


def _to_real(G: np.ndarray, grid: FrequencyGrid) -> np.ndarray:
    t0 = grid.t[0]
    return (np.fft.fft(G * np.exp(-1j * grid.xi * t0))).real * grid.dxi / (2 * math.pi)


def _to_freq(g: np.ndarray, grid: FrequencyGrid) -> np.ndarray:
    t0 = grid.t[0]
    return grid.dt * np.exp(1j * grid.xi * t0) * grid.n * np.fft.ifft(g)


def _half_argument(g: np.ndarray, grid: FrequencyGrid) -> np.ndarray:
    """G(xi/2) on the grid from samples of g."""
    n = grid.n
    j = np.arange(n)
    k = 2 * j - n // 2
    g2 = np.zeros(n)
    ok = (k >= 0) & (k < n)
    g2[ok] = g[k[ok]]
    return 2.0 * _to_freq(g2, grid)


def _kernel(xi: np.ndarray, r: int) -> np.ndarray:
    return np.exp(1j * (r - 1) * xi / 4) * (1 + 0.5j * xi) ** (-(r - 1) / 2)


def apply_map(g: np.ndarray, grid: FrequencyGrid, r: int, mean: float | None = None) -> np.ndarray:
    """One application of the renormalized map in real space."""
    Gh = _half_argument(g, grid)
    G = _kernel(grid.xi, r) * Gh ** 2
    out = _to_real(G, grid)
    out /= np.sum(out) * grid.dt
    if mean is not None:
        out = shift(out, grid, mean - np.sum(grid.t * out) * grid.dt)
    return out


def shift(g: np.ndarray, grid: FrequencyGrid, a: float) -> np.ndarray:
    """g(t - a) by a spectral phase."""
    return _to_real(_to_freq(g, grid) * np.exp(1j * grid.xi * a), grid)


def _fd_weights(order: int, half: int) -> np.ndarray:
    k = np.arange(-half, half + 1, dtype=float)
    V = np.vander(k, increasing=True).T
    rhs = np.zeros(k.size)
    rhs[order] = math.factorial(order)
    return np.linalg.solve(V, rhs)


def cumulants_from_G(G: np.ndarray, grid: FrequencyGrid, half: int = 6) -> dict:
    """kappa_1..kappa_4 from central differences of log G at 0."""
    n = grid.n
    idx = np.arange(-half, half + 1) % n
    logG = np.log(G[idx])
    # unwrap the phase so log G is smooth across the stencil
    logG = logG.real + 1j * np.unwrap(logG.imag)
    out = {}
    for k in range(1, 5):
        w = _fd_weights(k, half)
        deriv = np.dot(w, logG) / grid.dxi ** k
        out[f"k{k}"] = float((deriv / (1j) ** k).real)
    return out


def solve_g(r: int = 2, grid: FrequencyGrid | None = None, tol: float = 1e-12,
            max_iter: int = 500) -> FixedPointSolution:
    if tol < 1e-12:
        raise ValueError("tolerance below 1e-12 is not supported")
    grid = grid or FrequencyGrid()
    if grid.n * grid.dt / 2 < 20:
        raise ValueError("real-space half-width must be at least 20")
    mean = -(r - 1) / 4
    var = (r - 1) / 4
    t = grid.t
    g = np.exp(-(t - mean) ** 2 / (2 * var)) / math.sqrt(2 * math.pi * var)
    history = []
    for it in range(1, max_iter + 1):
        g_new = apply_map(g, grid, r, mean)
        diff = float(np.max(np.abs(g_new - g)))
        history.append(diff)
        g = g_new
        if diff < tol:
            break
    else:
        raise NoConvergence(f"no convergence after {max_iter} iterations (last diff {diff:.3e})")
    if g.min() < -tol:
        raise NegativeDensity(f"inverse transform dips to {g.min():.3e}")
    residual = float(np.max(np.abs(apply_map(g, grid, r, mean) - g)))
    G = _to_freq(g, grid)
    sol = FixedPointSolution(
        r=r, grid=grid, t=t, g=g, G=G, cumulants=cumulants_from_G(G, grid),
        residual=residual, iterations=it, mean_shift=float(np.sum(t * g) * grid.dt),
        history=history,
    )
    return sol


# ----------------------------------------------------------------------
# tails


def _phi(z: np.ndarray, r: int) -> np.ndarray:
    """i(r-1)z/4 - (r-1)/2 log(1 + iz/2), cancellation-free near 0."""
    w = 0.5j * z
    small = np.abs(w) < 1e-3
    out = np.empty_like(w)
    ws = w[small]
    out[small] = -ws ** 2 / 2 + ws ** 3 / 3 - ws ** 4 / 4 + ws ** 5 / 5
    wb = w[~small]
    out[~small] = np.log1p(wb) - wb
    return -(r - 1) / 2 * out


def log_G_exact(xi, r: int, mean: float | None = None, depth: int = 80) -> np.ndarray:
    """log of the fixed-point transform as the convergent dyadic product."""
    xi = np.asarray(xi, dtype=complex)
    mean = -(r - 1) / 4 if mean is None else mean
    total = 1j * mean * xi
    for j in range(depth):
        total = total + 2.0 ** j * _phi(xi / 2.0 ** j, r)
    return total


def tail_log_value(sol: FixedPointSolution, t: float, nodes: int = 16001) -> float:
    """log g(t) through a contour shifted to the Chernoff saddle.

    Working in log space keeps the super-exponential right tail finite.
    """
    r = sol.r
    mean = sol.mean_shift

    def chernoff(y):
        # log E exp(y X) - y t, with xi = -i y
        return float(log_G_exact(np.array([-1j * y]), r, mean)[0].real) - y * t

    if t > mean:
        # the right tail is steep, so search y on a log scale
        res = minimize_scalar(lambda s: chernoff(math.exp(s)), bounds=(-25.0, 45.0),
                              method="bounded", options={"xatol": 1e-12})
        y = math.exp(float(res.x))
    else:
        res = minimize_scalar(chernoff, bounds=(-1.999, 0.0), method="bounded",
                              options={"xatol": 1e-10})
        y = float(res.x)
    base = chernoff(y)
    # the integrand peaks at x = 0 with width ~ 1/sqrt(curvature); its
    # wings can be slow near the singularity at 2i, so widen until they die
    h = 1e-4
    curv = (chernoff(y + h) - 2 * base + chernoff(y - h)) / h ** 2
    width = 1.0 / math.sqrt(max(curv, 1e-12))

    def log_integrand(x):
        z = x - 1j * y
        return log_G_exact(z, r, mean) - 1j * z * t - base

    x_max = 20.0 * width
    while log_integrand(np.array([x_max]))[0].real > -45.0 and x_max < 1e4:
        x_max *= 2.0
    # x = width sinh(s) puts nodes on the peak scale and on the wings alike
    s = np.linspace(-1.0, 1.0, nodes) * math.asinh(x_max / width)
    x = width * np.sinh(s)
    val = np.trapezoid(np.exp(log_integrand(x)) * width * np.cosh(s), s).real / (2 * math.pi)
    if val <= 0:
        return -math.inf
    return base + math.log(val)


def tail_value(sol: FixedPointSolution, t: float) -> float:
    return math.exp(tail_log_value(sol, t))


def tail_rates(sol: FixedPointSolution, left_window=(-15.0, -5.0),
               right_points=(5.0, 10.0), min_points: int = 8):
    """(left_rate, right_shape).

    left_rate is the least-squares slope of log g over the left window (g
    behaves like exp(rate * t) there).  right_shape reports log g(t)/t at the
    two right points; super-exponential decay means it keeps decreasing.
    """
    lo, hi = left_window
    if hi - lo <= 0:
        raise FitWindowTooNarrow("empty left window")
    ts = np.linspace(lo, hi, max(min_points, 21))
    if ts.size < min_points:
        raise FitWindowTooNarrow("not enough points in the left window")
    logs = np.array([tail_log_value(sol, float(s)) for s in ts])
    if not np.all(np.isfinite(logs)):
        raise FitWindowTooNarrow("g is not resolved in the left window")
    slope = float(np.polyfit(ts, logs, 1)[0])
    a, b = right_points
    la, lb = tail_log_value(sol, a), tail_log_value(sol, b)
    if not (np.isfinite(la) and np.isfinite(lb)):
        raise FitWindowTooNarrow("g is not resolved at the right points")
    shape = {
        "t": [a, b],
        "log_g": [la, lb],
        "log_g_over_t": [la / a, lb / b],
        "superexponential": lb / b < la / a,
    }
    sol.left_rate = slope
    sol.right_shape = shape
    return slope, shape


# ----------------------------------------------------------------------
# limit profile


@dataclass
class PiProfile:
    t: np.ndarray
    values: np.ndarray
    C: float
    a: float
    extra: dict = field(default_factory=dict)

    @property
    def mass(self) -> float:
        return float(np.trapezoid(self.values, self.t))

    @property
    def mean(self) -> float:
        return float(np.trapezoid(self.t * self.values, self.t)) / self.mass


def tilt_center(t: np.ndarray, g: np.ndarray, tilt: float = 2.0 / 3.0) -> PiProfile:
    """C exp(-tilt t) g(t - a) with unit mass and zero mean.

    With s = t - a the mean of the result is a + (tilted mean of g), so a is
    minus the tilted mean.  The tilted product w(s) = exp(-tilt s) g(s) is
    shifted spectrally; it is bounded, so round-off is not amplified.
    ``t`` must be the centered uniform grid of a :class:`FrequencyGrid`.
    """
    n = t.size
    dt = t[1] - t[0]
    grid = FrequencyGrid(n=n, xi_max=math.pi / dt)
    if not np.allclose(grid.t, t, rtol=0, atol=1e-6 * dt):
        raise ValueError("t must be a centered FFT grid")
    with np.errstate(over="raise"):
        try:
            w = np.exp(-tilt * t) * g
        except FloatingPointError as exc:
            raise TiltOverflow("tilt overflows on this grid") from exc
    top = np.max(np.abs(w))
    if max(abs(w[0]), abs(w[-1])) > 1e-12 * top:
        raise TiltOverflow("tilted density does not decay at the grid edges")
    mass_w = float(np.sum(w) * dt)
    a = -float(np.sum(t * w) * dt) / mass_w
    vals = shift(w, grid, a)
    C = 1.0 / float(np.sum(vals) * dt)
    return PiProfile(t=t, values=C * vals, C=C * math.exp(tilt * a), a=a,
                     extra={"tilted_mass": mass_w})


def clean_profile(sol: FixedPointSolution, left_cut: float = -10.0,
                  floor: float = 1e-13) -> np.ndarray:
    """Grid g with the round-off tails replaced.

    Left of ``left_cut`` log g comes from contour evaluations (spline in t,
    linear extrapolation past the last node); on the right, values under
    ``floor`` are set to zero, which is far below their true size anyway
    only where g is already super-exponentially small.
    """
    t = sol.t
    g = sol.g.copy()
    nodes = np.linspace(max(t[0], -60.0), left_cut, 26)
    logs = np.array([tail_log_value(sol, float(s)) for s in nodes])
    spl = CubicSpline(nodes, logs)
    left = t < left_cut
    inner = left & (t >= nodes[0])
    g[inner] = np.exp(spl(t[inner]))
    outer = t < nodes[0]
    slope = float(spl(nodes[0], 1))
    g[outer] = np.exp(logs[0] + slope * (t[outer] - nodes[0]))
    right = (t > 0) & (g < floor)
    g[right] = 0.0
    return g


def build_pi(sol: FixedPointSolution, tilt: float = 2.0 / 3.0) -> PiProfile:
    return tilt_center(sol.t, clean_profile(sol), tilt)


# ----------------------------------------------------------------------
# comparison with a flow profile


def compare_flow_to_g(f, M_n: float, sol: FixedPointSolution,
                      window: tuple = (-8.0, 8.0), n_pts: int = 1601) -> float:
    """max over the window of e^{|t|} |M^{-1} f(t/M) - g(t - (r-1)/4)|.

    ``f`` is anything with ``t`` and ``values`` arrays (a ProfileF).
    """
    t = np.linspace(window[0], window[1], n_pts)
    spl_f = CubicSpline(f.t, f.values)
    s = t / M_n
    inside = (s >= f.t[0]) & (s <= f.t[-1])
    lhs = np.zeros_like(t)
    lhs[inside] = spl_f(s[inside]) / M_n
    rhs = sol.spline()(t - (sol.r - 1) / 4)
    return float(np.max(np.exp(np.abs(t)) * np.abs(lhs - rhs)))


# ----------------------------------------------------------------------
# real-space check of the integral equation


def literal_operator(sol: FixedPointSolution, t_eval: np.ndarray, n_u: int = 200,
                     n_rho: int = 120, u_max: float = 12.0, rho_max: float = 6.5) -> np.ndarray:
    """(2/sqrt(pi))^{r-1} int e^{-|v|^2} g(t-u+|v|^2/2) g(t+u+|v|^2/2) du dv by quadrature."""
    from .radial import sphere_area

    r = sol.r
    spl = sol.spline()
    tu, wu = np.polynomial.legendre.leggauss(n_u)
    u = u_max * tu
    wu = u_max * wu
    tr, wr = np.polynomial.legendre.leggauss(n_rho)
    rho = rho_max * (tr + 1) / 2
    wr = rho_max * wr / 2
    pref = (2 / math.sqrt(math.pi)) ** (r - 1)
    if r >= 2:
        ang = sphere_area(r - 1)
        wr = wr * ang * rho ** (r - 2) * np.exp(-rho ** 2)
    out = np.empty(len(t_eval))
    lo, hi = sol.t[0], sol.t[-1]
    for k, tk in enumerate(t_eval):
        a = tk - u[:, None] + rho[None, :] ** 2 / 2
        b = tk + u[:, None] + rho[None, :] ** 2 / 2
        ga = np.where((a > lo) & (a < hi), spl(np.clip(a, lo, hi)), 0.0)
        gb = np.where((b > lo) & (b < hi), spl(np.clip(b, lo, hi)), 0.0)
        out[k] = pref * np.sum(wu[:, None] * wr[None, :] * ga * gb)
    return out


def literal_discrepancy(sol: FixedPointSolution) -> dict:
    """Mass factor and mean drift of one literal application, plus the
    sup-distance after undoing them (the renormalized equation)."""
    t = np.linspace(-8, 8, 161)
    lit = literal_operator(sol, t)
    dense = np.linspace(-12, 12, 2401)
    lit_dense = literal_operator(sol, dense)
    mass = float(np.trapezoid(lit_dense, dense))
    mean = float(np.trapezoid(dense * lit_dense, dense) / mass)
    shift_r = (sol.r - 1) / 4
    restored = literal_operator(sol, t - shift_r) / mass
    target = sol.spline()(t)
    return {
        "mass_factor": mass,
        "expected_mass_factor": 2.0 ** (sol.r - 2),
        "mean_after": mean,
        "mean_before": sol.mean_shift,
        "mean_drift": mean - sol.mean_shift,
        "expected_mean_drift": -shift_r,
        "sup_residual_renormalized": float(np.max(np.abs(restored - target))),
        "sup_residual_literal": float(np.max(np.abs(lit - target))),
    }


def to_csv(sol: FixedPointSolution, pi: PiProfile, window=(-20.0, 20.0)) -> str:
    keep = (sol.t >= window[0]) & (sol.t <= window[1])
    buf = io.StringIO()
    buf.write("t,g,pi\n")
    for t, g, p in zip(sol.t[keep], sol.g[keep], pi.values[keep]):
        buf.write(f"{t:.17g},{g:.17g},{p:.17g}\n")
    return buf.getvalue()


def metadata_json(sol: FixedPointSolution, pi: PiProfile) -> str:
    meta = sol.metadata()
    meta["pi"] = {"C": pi.C, "a": pi.a, "mass": pi.mass, "mean": pi.mean}
    return json.dumps(meta, indent=2, sort_keys=True)
