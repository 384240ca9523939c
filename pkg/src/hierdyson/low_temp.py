"""Low-temperature side: rescaled radial profiles f_n, the approximating
operator T-bar, hypothesis-I diagnostics and the tilted profiles pi_n."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson
from scipy.interpolate import CubicSpline

from .coupling import a_seq, c_big
from .radial import sphere_area
from .rg_flow import LOW, FlowState, ModelParams, QuadratureDivergence, Trajectory, _level_N, to_p


class MeanViolation(ArithmeticError):
    pass


@dataclass(frozen=True)
class ProfileF:
    """f on a uniform t-grid; zero outside [t[0], t[-1]]."""

    t: np.ndarray
    values: np.ndarray
    n: int
    M: float
    c: float

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def mass(self) -> float:
        return float(simpson(self.values, dx=self.dt))

    def mean(self) -> float:
        return float(simpson(self.t * self.values, dx=self.dt)) / self.mass()

    def var(self) -> float:
        mu = self.mean()
        return float(simpson((self.t - mu) ** 2 * self.values, dx=self.dt)) / self.mass()

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        spl = CubicSpline(self.t, self.values)
        inside = (s >= self.t[0]) & (s <= self.t[-1])
        out = np.zeros_like(s)
        out[inside] = np.maximum(spl(s[inside]), 0.0)
        return out


def extract_f(state: FlowState, mean_tol: float = 1e-3) -> ProfileF:
    """f_n(t) = q_bar(M_n + t/c) / c with c = c^(n)."""
    if not state.M > 0:
        raise ValueError("M_n must be positive")
    q = state.q
    c = state.c_n
    h = q.grid.h
    qbar = q.values / simpson(q.values, dx=h)
    t = c * (q.x - state.M)
    vals = qbar / c
    f = ProfileF(t=t, values=vals, n=state.n, M=state.M, c=c)
    f = ProfileF(t=t, values=vals / f.mass(), n=state.n, M=state.M, c=c)
    first = float(simpson(t * f.values, dx=f.dt))
    if abs(first) > mean_tol:
        raise MeanViolation(f"first moment {first:.3e} of f_{state.n}")
    return f


# ----------------------------------------------------------------------
# the approximating operator


def _radial_v_rule(r: int, n_rho: int, rho_max: float):
    """Nodes/weights for int_{R^{r-1}} e^{-|v|^2} phi(|v|^2) dv."""
    x, w = np.polynomial.legendre.leggauss(n_rho)
    rho = rho_max * (x + 1) / 2
    w = rho_max * w / 2 * sphere_area(r - 1) * rho ** (r - 2) * np.exp(-rho ** 2)
    return rho, w


def _tbar_raw(f: ProfileF, M: float, c_next: float, r: int, n_out: int | None = None,
              n_u: int = 64, n_rho: int = 48, rho_max: float = 6.5):
    """(t, T-bar f(t)) before normalization."""
    lo, hi = float(f.t[0]), float(f.t[-1])
    # trim the zero padding so the u-rule sees only the support
    nz = np.nonzero(f.values > 0)[0]
    lo, hi = float(f.t[nz[0]]), float(f.t[nz[-1]])
    rho, wr = _radial_v_rule(r, n_rho, rho_max)
    shifts = rho ** 2 / (2 * M) if math.isfinite(M) else np.zeros_like(rho)
    s_lo = lo - shifts.max()
    n_out = n_out or max(f.t.size, 257)
    s = np.linspace(s_lo, hi, n_out)
    xu, wu = np.polynomial.legendre.leggauss(n_u)
    xu = (xu + 1) / 2
    wu = wu / 2
    sp = s[:, None] + shifts[None, :]                    # (n_out, n_rho)
    U = np.maximum(np.minimum(sp - lo, hi - sp), 0.0)
    u = U[:, :, None] * xu[None, None, :]
    prod = f(sp[:, :, None] + u) * f(sp[:, :, None] - u)
    inner = 2.0 * U * np.sum(prod * wu, axis=2)          # symmetric in u
    vals = np.sum(inner * wr[None, :], axis=1)
    return c_next * s, vals


def apply_Tbar(f: ProfileF, M: float, c_next: float, r: int = 2, **quad) -> ProfileF:
    """T-bar f normalized to unit mass and recentred at mean zero.

    ``M = inf`` gives the degenerate self-convolution limit.
    """
    t, vals = _tbar_raw(f, M, c_next, r, **quad)
    dt = t[1] - t[0]
    mass = float(simpson(vals, dx=dt))
    expected = c_next * math.pi ** ((r - 1) / 2) * 0.5 * f.mass() ** 2
    if not abs(mass / expected - 1) < 1e-6:
        raise QuadratureDivergence(f"T-bar mass {mass:.10g} vs {expected:.10g}")
    vals = vals / mass
    m = float(simpson(t * vals, dx=dt))
    return ProfileF(t=t - m, values=vals, n=f.n + 1, M=M + m / c_next if math.isfinite(M) else M,
                    c=f.c * c_next)


def m_shift(f: ProfileF, M: float, c_next: float, r: int = 2, **quad) -> float:
    """First moment of the un-centred normalized image."""
    t, vals = _tbar_raw(f, M, c_next, r, **quad)
    dt = t[1] - t[0]
    return float(simpson(t * vals, dx=dt) / simpson(vals, dx=dt))


def predicted_m(M: float, c_next: float, r: int) -> float:
    """m_n for a mean-zero f: the v-shift has mean (r-1)/(4M) in the f variable."""
    return -(r - 1) * c_next / (4 * M)


def sup_gap(a: ProfileF, b: ProfileF) -> float:
    t = np.union1d(a.t, b.t)
    return float(np.max(np.abs(a(t) - b(t))))


# ----------------------------------------------------------------------
# hypothesis I and N_1


def detect_N1_table(beta: list, M: list, N: int | None) -> int | None:
    """min{n >= N : beta[n+1] <= 100 / M[n]^2} over a table indexed by level."""
    if N is None:
        return None
    for n in range(N, len(M) - 1):
        b = beta[n + 1]
        if b is not None and not math.isnan(b) and b <= 100.0 / M[n] ** 2:
            return n
    return None


def detect_N1(traj: Trajectory) -> int | None:
    N = _level_N(traj.coupling, traj.params.eta)
    rows = sorted(traj.rows, key=lambda r: r["n"])
    if not rows or rows[0]["n"] != 0:
        raise ValueError("trajectory table must start at level 0")
    return detect_N1_table([r["beta_n"] for r in rows], [r["M_n"] for r in rows], N)


def envelope_constant(f: ProfileF, beta: float, floor: float = 1e-25) -> float:
    """Smallest C with f(t) <= C b^{-1/2} exp(-b^{-1/2} |2t + t^2/(cM)|) on the support."""
    sb = math.sqrt(beta)
    keep = f.values > floor * f.values.max()
    t = f.t[keep]
    with np.errstate(over="ignore"):
        bound_shape = np.exp(-np.abs(2 * t + t ** 2 / (f.c * f.M)) / sb) / sb
    return float(np.max(f.values[keep] / bound_shape))


# ----------------------------------------------------------------------
# pi_n and its tilted version


@dataclass
class PiN:
    n: int
    Mbar: float
    V: float
    L: float
    t: np.ndarray
    values: np.ndarray
    M_tilde: float
    V_tilde: float
    t_tilde: np.ndarray
    pi_tilde: np.ndarray
    C_n: float
    a0: float
    M_n0: float
    tilt_rate: float          # A_n l_n / c^(n)
    extra: dict = field(default_factory=dict)

    def tilde_moments(self) -> tuple[float, float]:
        dt = self.t_tilde[1] - self.t_tilde[0]
        mass = float(simpson(self.pi_tilde, dx=dt))
        mean = float(simpson(self.t_tilde * self.pi_tilde, dx=dt)) / mass
        return mass, mean


def build_pi_n(state: FlowState, params: ModelParams, a: float | None = None) -> PiN:
    """V_n and pi_n from p_n, plus the tilted profile pi-tilde_n.

    p-hat is normalized on the half line before taking V_n, so that pi_n
    has unit mass and unit second moment about M-bar.  With ``a=None`` the
    shift a_0 centres pi-tilde exactly; otherwise a_0 = a - (r-1)/4.
    """
    r = state.q.r
    p = to_p(state)
    x = p.x
    h = p.grid.h
    w = p.values / simpson(p.values, dx=h)
    Mbar = state.Mbar
    V = math.sqrt(float(simpson((x - Mbar) ** 2 * w, dx=h)))
    if not V > 0:
        raise ValueError("V_n vanished")
    t = (x - Mbar) / V
    L = float(simpson(p.values, dx=h)) / V
    pi_vals = p.values / (V * L)

    f = extract_f(state)
    M, c = state.M, state.c_n
    Al = state.A_n * state.l_n
    keep = f.values > 0
    tt = M * f.t[keep]
    # early levels tilt by e^{thousands}; stay in logs until normalized
    log_til = np.log(f.values[keep]) - Al * tt / c - Al * tt ** 2 / (2 * c * c * M * M)
    top = float(log_til.max())
    ftil = np.exp(log_til - top)
    dtt = tt[1] - tt[0]
    mass = float(simpson(ftil, dx=dtt))
    mean = float(simpson(tt * ftil, dx=dtt)) / mass
    a0 = -mean if a is None else a - (r - 1) / 4
    # pi_tilde(t) = C f_tilde(t - a0): same values on the grid shifted by +a0
    t_tilde = tt + a0
    log_C = -top - math.log(mass)
    C_n = math.exp(log_C) if log_C < 700 else math.inf
    T = state.T
    M_tilde = math.sqrt(T) * M
    V_tilde = math.sqrt(T) / (c * M)
    return PiN(
        n=state.n, Mbar=Mbar, V=V, L=L, t=t, values=pi_vals,
        M_tilde=M_tilde, V_tilde=V_tilde, t_tilde=t_tilde,
        pi_tilde=ftil / mass, C_n=C_n, a0=a0, M_n0=M_tilde + a0 * V_tilde,
        tilt_rate=Al / c, extra={"log_C": log_C},
    )


# ----------------------------------------------------------------------
# per-level table


@dataclass
class LowRow:
    n: int
    V: float
    lV: float
    m: float | None
    gamma: float | None
    N1_flag: bool
    gap: float | None
    envelope_C: float | None


def low_table(traj: Trajectory, **quad) -> list:
    """One row per stored Low level; m_n and the T-bar gap need level n+1."""
    params = traj.params
    cp = traj.coupling
    N1 = detect_N1(traj)
    rows = []
    levels = sorted(traj.states)
    r = params.r
    for n in levels:
        st = traj.states[n]
        if st.region != LOW:
            continue
        pin = build_pi_n(st, params)
        m = gamma = gap = env = None
        nxt = traj.states.get(n + 1)
        if nxt is not None:
            f = extract_f(st)
            # exact scale ratio of consecutive levels; l_{n+1}/l_n differs
            # from it by O(A_{n+1} - A_{n+2})
            c_next = nxt.c_n / st.c_n
            m = m_shift(f, st.M, c_next, r, **quad)
            gamma = m - predicted_m(st.M, c_next, r)
            gap = sup_gap(extract_f(nxt), apply_Tbar(f, st.M, c_next, r, **quad))
        if st.beta is not None:
            env = envelope_constant(extract_f(st), st.beta)
        rows.append(LowRow(n=n, V=pin.V, lV=st.l_n * pin.V, m=m, gamma=gamma,
                           N1_flag=N1 is not None and n >= N1, gap=gap, envelope_C=env))
    return rows


def low_table_csv(rows: list) -> str:
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, bool):
            return "1" if v else "0"
        return f"{v:.17g}"

    buf = io.StringIO()
    buf.write("n,V_n,l_n*V_n,m_n,gamma_n,N1_flag,sup_gap_exact_vs_Tbar\n")
    for row in rows:
        buf.write(",".join([str(row.n), fmt(row.V), fmt(row.lV), fmt(row.m), fmt(row.gamma),
                            fmt(row.N1_flag), fmt(row.gap)]) + "\n")
    return buf.getvalue()


def tilt_identity(coupling, n: int) -> float:
    """A_n l_n / c^(n), which tends to 2/3."""
    return a_seq(coupling, n) * coupling.l(n) / c_big(coupling, n)
