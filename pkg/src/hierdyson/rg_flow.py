"""The renormalization recursion q_n -> q_{n+1} and per-level bookkeeping.

Densities are kept in the q-coordinates, where one step is

    q_{n+1}(x) = Z_n^{-1} int_{R^r} exp(-c^(n) |u|^2) q_n(x - u) q_n(x + u) du,

and mapped back to the block-spin density p_n only for observables.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit
from scipy.integrate import simpson
from scipy.optimize import brentq

from .coupling import CouplingSequence, NoSuchLevel, a_seq, c_big, n_of_eta
from .radial import (
    FULL,
    RadialDensity,
    RadialGrid,
    SupportEscape,
    halfline_mass,
    log_spline,
    mass_full,
    moment_full,
    sphere_area,
)

LOW, HIGH, INTERMEDIATE, PREN = "Low", "High", "Intermediate", "PreN"
REACHED_HIGH, MAX_LEVEL, LEFT_LOW = "ReachedHigh", "MaxLevel", "LeftLowNotHigh"


class GridOverflow(ArithmeticError):
    pass


class QuadratureDivergence(ArithmeticError):
    pass


@dataclass(frozen=True)
class ModelParams:
    r: int = 2
    kappa: float = 0.1
    T: float = 1.0
    eps_poly: tuple = ()
    eta: float = 0.1
    eta_bar: float = 0.5
    theta_high: float = 1e-6

    def __post_init__(self):
        if int(self.r) != self.r or self.r < 2:
            raise ValueError("r must be an integer >= 2")
        if not 0 < self.kappa < 1:
            raise ValueError("kappa must lie in (0, 1)")
        if not self.T > 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        if not 0 < self.eta_bar < 1:
            raise ValueError("eta_bar must lie in (0, 1)")
        if not self.theta_high > 0:
            raise ValueError("theta_high must be positive")
        eps = tuple(float(e) for e in self.eps_poly)
        if eps and max(abs(e) for e in eps) >= 0.01:
            raise ValueError("perturbation coefficients must be below 0.01 in magnitude")
        object.__setattr__(self, "eps_poly", eps)

    def eps(self, t):
        """epsilon(t) as a polynomial in t."""
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for k, e in enumerate(self.eps_poly):
            out = out + e * t ** k
        return out


@dataclass(frozen=True)
class Numerics:
    """Discretization knobs for one flow."""

    quad_u: int = 96
    quad_rho: int = 96
    pts_per_scale: float = 24.0
    kernel_width: float = 6.0
    tail_floor: float = 1e-30
    coarse_nodes: int = 129
    x_ceiling: float = 1e7
    max_nodes: int = 400_000

    def doubled(self) -> "Numerics":
        return replace(self, quad_u=2 * self.quad_u, quad_rho=2 * self.quad_rho,
                       pts_per_scale=2 * self.pts_per_scale)


DEFAULT_NUMERICS = Numerics()


@dataclass
class FlowState:
    n: int
    T: float
    q: RadialDensity
    Z: float
    M: float
    Mbar: float
    D2: float
    l_n: float
    A_n: float
    c_n: float          # c^(n)
    beta: float | None
    alpha: float | None
    low_ratio: float | None   # beta_{n-1} / c^(n-1), None when undefined
    N: int | None
    c0A0: float
    region: str = LOW
    axis_std: float = 0.0

    @property
    def log_chi(self) -> float:
        return self.n * math.log(2.0) + 2.0 * math.log(self.Mbar) if self.Mbar > 0 else -math.inf

    @property
    def chi_est(self) -> float:
        lc = self.log_chi
        return math.exp(lc) if lc < 700 else math.inf

    def summary(self) -> dict:
        return {
            "n": self.n, "T": self.T, "M_n": self.M, "Mbar_n": self.Mbar,
            "chi_est": self.chi_est, "beta_n": self.beta, "alpha_n": self.alpha,
            "D2_n": self.D2, "region": self.region, "Z_n": self.Z,
            "log_chi": self.log_chi, "c_big": self.c_n, "l_n": self.l_n, "A_n": self.A_n,
            "low_ratio": self.low_ratio,
        }


@dataclass
class Trajectory:
    params: ModelParams
    coupling: CouplingSequence
    rows: list = field(default_factory=list)
    states: dict = field(default_factory=dict)
    termination: str = MAX_LEVEL

    @property
    def final(self) -> FlowState:
        return self.states[max(self.states)]

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=float)

    @property
    def regions(self) -> list:
        return [r["region"] for r in self.rows]

    def to_csv(self) -> str:
        cols = ["n", "T", "M_n", "Mbar_n", "chi_est", "beta_n", "alpha_n", "D2_n", "region", "Z_n"]
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        for row in self.rows:
            out = []
            for c in cols:
                v = row[c]
                if v is None:
                    out.append("")
                elif isinstance(v, str):
                    out.append(v)
                elif isinstance(v, (int, np.integer)):
                    out.append(str(int(v)))
                else:
                    out.append(f"{float(v):.17g}")
            buf.write(",".join(out) + "\n")
        return buf.getvalue()


# ----------------------------------------------------------------------
# profile helpers


def axis_profile(q: RadialDensity) -> np.ndarray:
    """q restricted to a ray, normalized on the half line (no Jacobian)."""
    return q.values / halfline_mass(q)


def axis_moments(q: RadialDensity) -> tuple[float, float]:
    """Mean and standard deviation of the half-line axis profile."""
    prof = axis_profile(q)
    x = q.x
    h = q.grid.h
    mean = float(simpson(x * prof, dx=h))
    var = float(simpson((x - mean) ** 2 * prof, dx=h))
    return mean, math.sqrt(max(var, 0.0))


def _mbar(q: RadialDensity, T: float, Al: float) -> float:
    x = q.x
    with np.errstate(divide="ignore"):
        logq = np.where(q.values > 0, np.log(np.maximum(q.values, 1e-300)), -np.inf)
    logw = logq - Al * x ** 2 / 2
    logw -= logw.max()
    w = np.exp(logw)
    num = simpson(w * x ** (q.r + 1), dx=q.grid.h)
    den = simpson(w * x ** (q.r - 1), dx=q.grid.h)
    return math.sqrt(T * num / den)


def _snap_grid(lo: float, hi: float, h: float, num: Numerics) -> RadialGrid:
    if hi > num.x_ceiling:
        raise GridOverflow(f"profile reaches x={hi:.3e}, beyond the grid ceiling")
    if lo <= 0.5 * (hi - lo) or lo <= 4 * h:
        x_min = 0.0
    else:
        x_min = lo
    m = int(math.ceil((hi - x_min) / h)) + 1
    m = max(m, 65)
    if m % 2 == 0:
        m += 1
    if m > num.max_nodes:
        raise GridOverflow(f"grid would need {m} nodes")
    return RadialGrid(h=h, m=m, x_min=x_min)


def _finish_state(q, n, T, Z, params, coupling, beta, alpha, low_ratio, N, c0A0) -> FlowState:
    A = a_seq(coupling, n)
    ln = coupling.l(n)
    cn = c_big(coupling, n)
    M, std = axis_moments(q)
    D2 = cn * moment_full(q, 2) / mass_full(q)
    st = FlowState(
        n=n, T=T, q=q, Z=Z, M=M, Mbar=_mbar(q, T, A * ln), D2=D2, l_n=ln, A_n=A,
        c_n=cn, beta=beta, alpha=alpha, low_ratio=low_ratio, N=N, c0A0=c0A0,
        axis_std=std,
    )
    st.region = classify(st, params.eta, params.theta_high)
    return st


def _level_N(coupling: CouplingSequence, eta: float) -> int | None:
    try:
        return n_of_eta(coupling, eta)
    except NoSuchLevel:
        return None


# ----------------------------------------------------------------------
# initial density


def init_q0(params: ModelParams, coupling: CouplingSequence,
            num: Numerics = DEFAULT_NUMERICS) -> FlowState:
    """q_0 proportional to (1 + eps(T x^2)) exp{(c_0 A_0 - T) x^2/2 - kappa T^2 x^4/4}."""
    T, kap = params.T, params.kappa
    c0A0 = coupling.l(0) * a_seq(coupling, 0)
    a2 = c0A0 - T
    b4 = kap * T * T

    def phi(x):
        x = np.asarray(x, dtype=float)
        return a2 * x ** 2 / 2 - b4 * x ** 4 / 4 + np.log1p(params.eps(T * x ** 2))

    x_hat = math.sqrt(a2 / b4) if a2 > 0 else 0.0
    if x_hat > num.x_ceiling:
        raise GridOverflow(f"radial mode {x_hat:.3e} beyond the grid ceiling")
    peak = float(phi(x_hat))
    drop = math.log(num.tail_floor) - 1.0
    X = max(2 * x_hat, 1.0)
    while phi(X) - peak > drop:
        X *= 2
        if X > 10 * num.x_ceiling:
            raise GridOverflow("initial density does not decay inside the ceiling")
    hi = brentq(lambda x: float(phi(x)) - peak - drop, x_hat, X, xtol=1e-14 * X)
    lo = 0.0
    if x_hat > 0 and phi(0.0) - peak < drop:
        probe = np.linspace(0.0, x_hat, 20001)
        keep = _keep_mask(probe, np.exp(phi(probe) - peak), num.tail_floor, c0A0)
        i0 = int(np.argmax(keep))
        lo = float(probe[max(i0 - 1, 0)])
    xs = np.linspace(lo, hi, 4001)
    w = np.exp(phi(xs) - phi(xs).max())
    mean = np.trapezoid(xs * w) / np.trapezoid(w)
    std = math.sqrt(np.trapezoid((xs - mean) ** 2 * w) / np.trapezoid(w))
    grid = _snap_grid(lo, hi, std / num.pts_per_scale, num)
    x = grid.nodes
    logv = phi(x)
    vals = np.exp(logv - logv.max())
    if grid.x_min > 0:
        vals[x < lo] = 0.0
    vals[x > hi] = 0.0
    q = RadialDensity(grid, vals, params.r, FULL)
    Z = mass_full(q)
    q = RadialDensity(grid, vals / Z, params.r, FULL)
    N = _level_N(coupling, params.eta)
    beta = alpha = None
    if N == 0:
        beta = c_big(coupling, 0) ** 2
        alpha = beta / 200
    return _finish_state(q, 0, T, Z, params, coupling, beta, alpha, None, N, c0A0)


# ----------------------------------------------------------------------
# the step


@njit(cache=True)
def _axis_convolution(xs, coef, x0, h, lo, hi, c, U, tu, wu, tr, wr, rpow, out):
    nseg = coef.shape[1]
    for k in range(xs.size):
        x = xs[k]
        U1 = min(U, hi - x)
        R2 = hi * hi - x * x
        if U1 <= 0.0 or R2 <= 0.0:
            out[k] = 0.0
            continue
        R = min(U, math.sqrt(R2))
        acc = 0.0
        for i in range(tu.size):
            u = U1 * tu[i]
            xm = x - u
            xp = x + u
            cu = c * u * u
            inner = 0.0
            for j in range(tr.size):
                rho = R * tr[j]
                rr = rho * rho
                r2 = math.sqrt(xp * xp + rr)
                if r2 > hi:
                    break
                r1 = math.sqrt(xm * xm + rr)
                if r1 < lo:
                    continue
                s = (r1 - x0) / h
                ii = int(s)
                if ii >= nseg:
                    ii = nseg - 1
                d = r1 - (x0 + ii * h)
                v1 = ((coef[0, ii] * d + coef[1, ii]) * d + coef[2, ii]) * d + coef[3, ii]
                s = (r2 - x0) / h
                ii = int(s)
                if ii >= nseg:
                    ii = nseg - 1
                d = r2 - (x0 + ii * h)
                v2 = ((coef[0, ii] * d + coef[1, ii]) * d + coef[2, ii]) * d + coef[3, ii]
                wgt = wr[j]
                if rpow > 0:
                    wgt *= rho ** rpow
                inner += wgt * math.exp(v1 + v2 - cu - c * rr)
            acc += wu[i] * inner
        out[k] = acc * U1 * R


def _gl01(n: int):
    t, w = np.polynomial.legendre.leggauss(n)
    return (t + 1) / 2, w / 2


class _Convolver:
    """Evaluates the (unnormalized) recursion integral at axis points."""

    def __init__(self, q: RadialDensity, c: float, num: Numerics):
        spl, lo, hi = log_spline(q, 0.0)
        self.coef = np.ascontiguousarray(spl.c)
        self.x0 = float(spl.x[0])
        self.h = float(spl.x[1] - spl.x[0])
        self.lo, self.hi = lo, hi
        if q.grid.x_min == 0.0 and lo == 0.0:
            self.lo = 0.0
        self.c = float(c)
        self.U = num.kernel_width / math.sqrt(c) if c > 0 else math.inf
        self.tu, self.wu = _gl01(num.quad_u)
        self.tr, self.wr = _gl01(num.quad_rho)
        self.r = q.r
        self.pref = 2.0 * sphere_area(q.r - 1)

    def out_window(self) -> tuple[float, float]:
        if math.isinf(self.U):
            return 0.0, self.hi
        return math.sqrt(max(self.lo ** 2 - self.U ** 2, 0.0)), self.hi

    def __call__(self, xs: np.ndarray) -> np.ndarray:
        xs = np.ascontiguousarray(xs, dtype=float)
        out = np.empty_like(xs)
        U = self.U if math.isfinite(self.U) else 1e300
        _axis_convolution(xs, self.coef, self.x0, self.h, self.lo, self.hi, self.c, U,
                          self.tu, self.wu, self.tr, self.wr, self.r - 2, out)
        return self.pref * out


# smallest q-value (relative to the peak) that is still worth storing
REPRESENTABLE = 1e-290


def _keep_mask(xs, vals, floor, Al=0.0):
    """Nodes that matter either for q itself or for p = q exp(-Al x^2/2).

    The Gaussian factor lifts the inner part of q by many orders of
    magnitude when mapped back to p, so a floor on q alone can drop real
    p-mass near the origin.
    """
    top = vals.max()
    keep = vals > floor * top
    if Al > 0:
        pos = vals > REPRESENTABLE * top
        if np.any(pos):
            lw = np.full(vals.shape, -np.inf)
            lw[pos] = np.log(vals[pos] / top) - Al * xs[pos] ** 2 / 2
            keep |= pos & (lw > lw.max() + math.log(floor))
    return keep


def _support(xs, vals, floor, Al=0.0):
    idx = np.nonzero(_keep_mask(xs, vals, floor, Al))[0]
    return idx[0], idx[-1]


def _coarse_std(xs, vals):
    w = vals / np.trapezoid(vals, xs)
    mean = np.trapezoid(xs * w, xs)
    return math.sqrt(max(np.trapezoid((xs - mean) ** 2 * w, xs), 0.0))


def convolve_profile(q: RadialDensity, c: float, num: Numerics = DEFAULT_NUMERICS,
                     weight: float = 0.0):
    """One application of the recursion integral, on a freshly chosen grid.

    ``weight`` is A l of the output level; the support is chosen so that
    the p-profile q exp(-weight x^2/2) is resolved as well as q.
    Returns (q_next normalized over R^r, raw mass Z).
    """
    conv = _Convolver(q, c, num)
    lo, hi = conv.out_window()
    for _ in range(6):
        xs = np.linspace(lo, hi, num.coarse_nodes)
        vals = conv(xs)
        if not np.any(vals > 0):
            raise QuadratureDivergence("recursion integral vanished on the whole window")
        i0, i1 = _support(xs, vals, num.tail_floor, weight)
        new_lo = xs[max(i0 - 1, 0)]
        new_hi = xs[min(i1 + 1, xs.size - 1)]
        if i1 - i0 >= 24 or (new_lo, new_hi) == (lo, hi):
            break
        lo, hi = new_lo, new_hi
    std = _coarse_std(xs[i0:i1 + 1], vals[i0:i1 + 1]) if i1 > i0 else (hi - lo) / 8
    std = max(std, (hi - lo) / 400)
    # skewed profiles can be much narrower on one side than std suggests,
    # so the spacing is halved until Simpson at h and 2h agree
    h = std / num.pts_per_scale
    for attempt in range(4):
        grid = _snap_grid(new_lo, new_hi, h, num)
        x = grid.nodes
        vals = np.zeros(grid.m)
        live = (x >= new_lo) & (x <= new_hi)
        vals[live] = conv(x[live])
        raw = RadialDensity(grid, vals, q.r, FULL)
        Z = mass_full(raw)
        if not Z > 0:
            raise QuadratureDivergence("recursion produced zero mass")
        Z2 = sphere_area(q.r) * float(simpson(x[::2] ** (q.r - 1) * vals[::2], dx=2 * grid.h))
        if abs(Z2 - Z) <= 1e-4 * Z:
            break
        h /= 2
    else:
        raise QuadratureDivergence(f"mass check failed: {Z:.6e} vs {Z2:.6e}")
    out = RadialDensity(grid, vals / Z, q.r, FULL)
    _, std_fine = axis_moments(out)
    if std_fine < 3 * grid.h:
        raise QuadratureDivergence("mass concentrated within three grid cells")
    return out, Z


def update_beta_alpha(state: FlowState, coupling: CouplingSequence, eta: float | None = None):
    """(beta_{n+1}, alpha_{n+1}); (None, None) before the seed level N."""
    N = state.N
    n = state.n
    if N is None or n + 1 < N:
        return None, None
    if n + 1 == N:
        b = c_big(coupling, N) ** 2 / 2.0 ** N
        return b, b / 200.0
    if state.beta is None:
        raise ValueError("beta recursion used before the seed level")
    cn = state.c_n
    cnext = coupling.c_small(n + 1)
    root = math.sqrt(state.beta / cn)
    M2 = state.M ** 2
    beta = (cnext ** 2 / 2 + root) * state.beta + 10.0 / M2
    alpha = (cnext ** 2 / 2 - root) * state.alpha + 1e-12 / M2
    return beta, alpha


def classify(state: FlowState, eta: float, theta_high: float | None = None) -> str:
    """Region of (n, T).

    With ``theta_high=None`` the high test uses exp(-1/eta^2); runs pass the
    practical threshold instead.  The high test is applied first.
    """
    thr = math.exp(-1.0 / eta ** 2) if theta_high is None else theta_high
    if state.D2 < thr:
        return HIGH
    if state.T <= state.c0A0 / 2:
        if state.N is None or state.n <= state.N:
            return LOW
        if state.low_ratio is not None and state.low_ratio <= eta:
            return LOW
        return INTERMEDIATE
    if state.N is None or state.n <= state.N:
        return PREN
    return INTERMEDIATE


def step(state: FlowState, params: ModelParams, coupling: CouplingSequence,
         num: Numerics = DEFAULT_NUMERICS, c_override: float | None = None) -> FlowState:
    c = state.c_n if c_override is None else c_override
    Al_next = a_seq(coupling, state.n + 1) * coupling.l(state.n + 1)
    q_next, Z = convolve_profile(state.q, c, num, Al_next)
    beta, alpha = update_beta_alpha(state, coupling, params.eta)
    low_ratio = None
    if state.beta is not None and state.n >= (state.N or 0):
        low_ratio = state.beta / state.c_n
    return _finish_state(q_next, state.n + 1, state.T, Z, params, coupling, beta, alpha,
                         low_ratio, state.N, state.c0A0)


def to_p(state: FlowState, params: ModelParams | None = None,
         coupling: CouplingSequence | None = None) -> RadialDensity:
    """p_n(y) proportional to exp(-A_n l_n y^2 / 2T) q_n(y / sqrt T), normalized on R^r."""
    q = state.q
    T = state.T
    x = q.x
    with np.errstate(divide="ignore"):
        logq = np.where(q.values > 0, np.log(np.maximum(q.values, 1e-300)), -np.inf)
    logp = logq - state.A_n * state.l_n * x ** 2 / 2
    logp -= logp.max()
    vals = np.exp(logp)
    sq = math.sqrt(T)
    grid = RadialGrid(h=q.grid.h * sq, m=q.grid.m, x_min=q.grid.x_min * sq)
    return RadialDensity(grid, vals, q.r, FULL).normalized()


def run(params: ModelParams, coupling: CouplingSequence, n_max: int,
        num: Numerics = DEFAULT_NUMERICS, keep: str | int = "all",
        stop_on_exit: bool = False) -> Trajectory:
    """Iterate until the practical high threshold, n_max, or (optionally) exit from Low.

    ``keep`` controls which FlowStates are retained: "all", "last", or an
    integer k for the last k levels.
    """
    if n_max < 0:
        raise ValueError("n_max must be >= 0")
    traj = Trajectory(params, coupling)
    st = init_q0(params, coupling, num)

    def record(s):
        traj.rows.append(s.summary())
        traj.states[s.n] = s
        if keep == "last":
            for k in [k for k in traj.states if k != s.n]:
                del traj.states[k]
        elif isinstance(keep, int) and not isinstance(keep, bool):
            for k in [k for k in traj.states if k <= s.n - keep]:
                del traj.states[k]

    record(st)
    while True:
        if st.region == HIGH:
            traj.termination = REACHED_HIGH
            break
        if stop_on_exit and st.region != LOW:
            traj.termination = LEFT_LOW
            break
        if st.n >= n_max:
            traj.termination = MAX_LEVEL
            break
        try:
            st = step(st, params, coupling, num)
        except (QuadratureDivergence, SupportEscape, GridOverflow) as exc:
            raise type(exc)(f"level {st.n + 1}: {exc}") from exc
        record(st)
    return traj


def make_state(q: RadialDensity, n: int, params: ModelParams,
               coupling: CouplingSequence) -> FlowState:
    """Wrap an arbitrary normalized profile as a level-n state (beta undefined)."""
    c0A0 = coupling.l(0) * a_seq(coupling, 0)
    q = q.normalized()
    return _finish_state(q, n, params.T, 1.0, params, coupling, None, None, None,
                         _level_N(coupling, params.eta), c0A0)


def gaussian_profile(r: int, s2: float, pts_per_scale: float = 24.0,
                     tail_floor: float = 1e-30) -> RadialDensity:
    """Isotropic Gaussian (2 pi s2)^{-r/2} exp(-x^2 / 2 s2) on an adapted grid."""
    s = math.sqrt(s2)
    hi = s * math.sqrt(-2 * math.log(tail_floor) + 2)
    std_axis = s * math.sqrt(1 - 2 / math.pi)
    h = std_axis / pts_per_scale
    m = int(math.ceil(hi / h)) + 1
    m += (m + 1) % 2
    grid = RadialGrid(h=h, m=max(m, 65))
    x = grid.nodes
    vals = (2 * math.pi * s2) ** (-r / 2) * np.exp(-x ** 2 / (2 * s2))
    return RadialDensity(grid, vals, r, FULL)
