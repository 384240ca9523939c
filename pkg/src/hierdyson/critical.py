"""Critical temperature, exit levels, and exponent fits.

The Low predicate at level n is read as "every level up to n is Low", so it
is monotone in n by construction.  One flow at temperature T therefore
settles the predicate for all levels at once through the exit level
nbar(T), and the bisections for different n share their evaluations.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.integrate import simpson
from scipy.special import zeta

from .coupling import CouplingSequence, NoSuchLevel, a_seq, c_big, dyson_sum, n_of_eta
from .rg_flow import (
    DEFAULT_NUMERICS,
    LOW,
    LEFT_LOW,
    ModelParams,
    Numerics,
    Trajectory,
    run,
    to_p,
)
from .radial import sphere_area


class BracketInvalid(ValueError):
    pass


class InsufficientPoints(ValueError):
    pass


ALL_HIGH = "AllHigh"
RESOLVED = "Resolved"
BELOW_RESOLUTION = "T below scan resolution of T_c"


def nbar(traj: Trajectory) -> int | None:
    """First level whose state is not Low; None when Low throughout."""
    for row in traj.rows:
        if row["region"] != LOW:
            return row["n"]
    return None


def correlation_length(n: int | None) -> float:
    return math.inf if n is None else 2.0 ** n


# ----------------------------------------------------------------------
# tail sums of 1/c^(n)


def _polylog_inv_c(a: float, lam: float, k: np.ndarray, depth: int = 80) -> np.ndarray:
    """1/c^(k) for l_k = (1 + a k)^lam, vectorized over k."""
    base = 1.0 + a * k
    A = np.ones_like(base)
    for j in range(1, depth + 1):
        A += 2.0 ** -j * ((base + a * j) / base) ** lam
    return 1.0 / ((1.0 + A) * base ** lam)


def inv_c_tail(coupling: CouplingSequence, n: int, n_exact: int = 200_000) -> float:
    """Sum_{k >= n} 1/c^(k).

    Polylog couplings are summed exactly over n_exact terms, then closed by
    the integral of 1/(3 l_k), the limit of 1/c^(k) as A_k -> 2, with the
    leading correction in A_k - 2.
    """
    if coupling.form == "constant":
        return math.inf
    if coupling.form == "polylog":
        a, lam = coupling.a, coupling.lam
        if lam <= 1:
            return math.inf
        k = np.arange(n, n + n_exact, dtype=float)
        head = math.fsum(_polylog_inv_c(a, lam, k))
        edge = 1.0 + a * (n + n_exact)
        tail = edge ** (1 - lam) / (3 * a * (lam - 1)) + edge ** (-lam) / 6
        # first-order correction from A_k - 2 ~ 2 lam a / (1 + a k)
        tail -= 2.0 / 9.0 * edge ** (-lam)
        return head + tail
    res = dyson_sum(coupling)
    if not res.converged:
        return math.inf
    # explicit sequences: exact head plus a geometric ratio tail
    head, k = 0.0, n
    while k < n + 4000:
        head += 1.0 / c_big(coupling, k)
        k += 1
    ratio = coupling.l(k) / coupling.l(k - 1)
    return head + (1.0 / c_big(coupling, k)) / (1 - 1 / ratio) if ratio > 1 else math.inf


def inv_l_tail(coupling: CouplingSequence, n: int) -> float:
    """Sum_{j >= n} 1/l_j."""
    if coupling.form == "constant":
        return math.inf
    if coupling.form == "polylog":
        a, lam = coupling.a, coupling.lam
        if lam <= 1:
            return math.inf
        # sum_{j>=n} (1 + a j)^-lam = a^-lam zeta(lam, n + 1/a)
        return float(a ** -lam * zeta(lam, n + 1.0 / a))
    head = sum(1.0 / coupling.l(j) for j in range(1, n))
    res = dyson_sum(coupling)
    return res.value - head + (1.0 if n <= 0 else 0.0) if res.converged else math.inf


# ----------------------------------------------------------------------
# memoized exit levels


@dataclass
class ExitRecord:
    T: float
    nbar: int | None          # None: Low through n_max
    final_region: str
    log_chi: float
    M: list                   # M_n along the run
    beta: list


class ExitLevels:
    """n -> "(n, T) is Low" evaluated through cached flows."""

    def __init__(self, params: ModelParams, coupling: CouplingSequence, n_max: int,
                 num: Numerics = DEFAULT_NUMERICS):
        self.params = params
        self.coupling = coupling
        self.n_max = n_max
        self.num = num
        self.cache: dict[float, ExitRecord] = {}

    def record(self, T: float) -> ExitRecord:
        T = float(T)
        hit = self.cache.get(T)
        if hit is None:
            tr = run(replace(self.params, T=T), self.coupling, self.n_max, self.num,
                     keep="last", stop_on_exit=True)
            last = tr.rows[-1]
            hit = ExitRecord(
                T=T,
                nbar=last["n"] if tr.termination == LEFT_LOW else None,
                final_region=last["region"],
                log_chi=last["log_chi"],
                M=[row["M_n"] for row in tr.rows],
                beta=[row["beta_n"] for row in tr.rows],
            )
            self.cache[T] = hit
        return hit

    def is_low(self, n: int, T: float) -> bool:
        if n > self.n_max:
            raise ValueError("level beyond the cached horizon")
        nb = self.record(T).nbar
        return nb is None or nb > n

    def known_bracket(self, n: int, lo: float, hi: float) -> tuple[float, float]:
        """Tighten (lo, hi) for level n using flows already in the cache."""
        for T, rec in self.cache.items():
            if not lo < T < hi:
                continue
            if rec.nbar is None or rec.nbar > n:
                lo = T
            else:
                hi = T
        return lo, hi


def bisect_Tn(params: ModelParams, coupling: CouplingSequence, n: int,
              T_bracket: tuple[float, float], tol_T: float,
              num: Numerics = DEFAULT_NUMERICS, levels: ExitLevels | None = None) -> float:
    """Largest T with (n, T) Low, to within tol_T.

    An 8-point scan first confirms that the predicate flips exactly once.
    """
    lv = levels or ExitLevels(params, coupling, n, num)
    lo, hi = map(float, T_bracket)
    if not 0 < lo < hi:
        raise BracketInvalid("bracket must satisfy 0 < T_lo < T_hi")
    pts = np.linspace(lo, hi, 10)
    flags = [lv.is_low(n, T) for T in pts]
    if not flags[0] or flags[-1]:
        raise BracketInvalid(f"level {n}: bracket ends do not classify differently")
    flips = sum(a != b for a, b in zip(flags, flags[1:]))
    if flips != 1:
        raise BracketInvalid(f"level {n}: predicate flips {flips} times in the bracket")
    k = flags.index(False)
    lo, hi = pts[k - 1], pts[k]
    while hi - lo > tol_T:
        mid = 0.5 * (lo + hi)
        if lv.is_low(n, mid):
            lo = mid
        else:
            hi = mid
    return lo


# ----------------------------------------------------------------------
# the scan


@dataclass
class CriticalScan:
    params: dict
    coupling: dict
    eta: float
    verdict: str
    n_levels: int
    levels: list = field(default_factory=list)
    T_n: list = field(default_factory=list)
    Tc: float | None = None
    Tc_bracket: tuple | None = None
    Tc_err: float | None = None
    c_increments: list = field(default_factory=list)
    records: list = field(default_factory=list)
    exponents: dict = field(default_factory=dict)

    @property
    def increment_band(self) -> float | None:
        inc = [v for v in self.c_increments if v > 0]
        if len(inc) < len(self.c_increments) or not inc:
            return None
        return max(inc) / min(inc)

    def to_json(self) -> str:
        out = asdict(self)
        out["records"] = [{k: v for k, v in r.items() if k not in ("M", "beta")}
                          for r in self.records]
        return json.dumps(out, indent=2, sort_keys=True, default=_json_default)

    def records_csv(self) -> str:
        buf = io.StringIO()
        buf.write("T,final_region,nbar,xi,log_chi,M_inf\n")
        for r in sorted(self.records, key=lambda r: r["T"]):
            vals = [f"{r['T']:.17g}", r["final_region"],
                    "" if r["nbar"] is None else str(r["nbar"]),
                    "" if r["nbar"] is None else f"{correlation_length(r['nbar']):.17g}",
                    f"{r['log_chi']:.17g}",
                    "" if r.get("M_inf") is None else f"{r['M_inf']:.17g}"]
            buf.write(",".join(vals) + "\n")
        return buf.getvalue()


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(type(obj).__name__)


def m_inf_fit(M: list, coupling: CouplingSequence, start: int) -> tuple[float, float, float]:
    """Fit M_n^2 = M_inf^2 + b S_n over n >= start with S_n = sum_{k>=n} 1/c^(k).

    Returns (M_inf^2, b, rms residual).
    """
    n = np.arange(start, len(M))
    if n.size < 3:
        raise InsufficientPoints("need three levels for the M_inf fit")
    inv_c = np.array([1.0 / c_big(coupling, int(k)) for k in n])
    S = inv_c_tail(coupling, start) - np.concatenate(([0.0], np.cumsum(inv_c)[:-1]))
    y = np.asarray(M, dtype=float)[n] ** 2
    X = np.column_stack([np.ones_like(S), S])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = float(np.sqrt(np.mean((X @ coef - y) ** 2)))
    return float(coef[0]), float(coef[1]), resid


def _record_dict(rec: ExitRecord, coupling: CouplingSequence, fit_start: int | None) -> dict:
    out = {"T": rec.T, "final_region": rec.final_region, "nbar": rec.nbar,
           "log_chi": rec.log_chi, "M_inf": None, "M": rec.M, "beta": rec.beta}
    if rec.nbar is None and fit_start is not None and len(rec.M) - fit_start >= 3:
        m2, _, _ = m_inf_fit(rec.M, coupling, fit_start)
        out["M_inf"] = math.sqrt(m2) if m2 > 0 else 0.0
    return out


def estimate_Tc(params: ModelParams, coupling: CouplingSequence, n_levels: int,
                tol_T: float, num: Numerics = DEFAULT_NUMERICS, n_tail: int = 8,
                T_bracket: tuple[float, float] | None = None,
                levels: ExitLevels | None = None) -> CriticalScan:
    """T_n for the last ``n_tail`` levels up to n_levels and the T_c bracket."""
    scan = CriticalScan(params=asdict(params), coupling=coupling.to_dict(), eta=params.eta,
                        verdict=RESOLVED, n_levels=n_levels)
    if not dyson_sum(coupling).converged:
        scan.verdict = ALL_HIGH
        scan.Tc = 0.0
        return scan
    c0A0 = coupling.l(0) * a_seq(coupling, 0)
    if T_bracket is None:
        T_bracket = (1e-3 * c0A0, 0.5 * c0A0 * (1 + 1e-9))
    lv = levels or ExitLevels(params, coupling, n_levels, num)
    first = max(1, n_levels - n_tail + 1)
    scan.levels = list(range(first, n_levels + 1))
    lo, hi = T_bracket
    for n in scan.levels:
        Tn = bisect_Tn(params, coupling, n, lv.known_bracket(n, lo, hi), tol_T, num, lv)
        scan.T_n.append(Tn)
        hi = min(hi, Tn + 2 * tol_T)   # T_n is nonincreasing in n
    if len(set(scan.T_n)) == 1 and scan.T_n[0] >= 0.5 * c0A0 - 2 * tol_T:
        scan.verdict = BELOW_RESOLUTION
    Tl, Tm = scan.T_n[-1], scan.T_n[-2] if len(scan.T_n) > 1 else scan.T_n[-1]
    width = max(Tm - Tl, 0.0)
    scan.Tc_bracket = (Tl - width, Tl)
    scan.Tc = Tl - width / 2
    scan.Tc_err = width / 2 + tol_T
    scan.c_increments = [c_big(coupling, n) * (a - b)
                         for n, a, b in zip(scan.levels, scan.T_n, scan.T_n[1:])]
    fit_start = _fit_start(params, coupling)
    scan.records = [_record_dict(r, coupling, fit_start) for r in lv.cache.values()]
    scan.records.sort(key=lambda r: r["T"])
    return scan


def _fit_start(params: ModelParams, coupling: CouplingSequence) -> int | None:
    """The seed level N, where the beta machinery starts."""
    try:
        return n_of_eta(coupling, params.eta)
    except NoSuchLevel:
        return None


def add_temperatures(scan: CriticalScan, temps, num: Numerics = DEFAULT_NUMERICS,
                     n_max: int | None = None) -> CriticalScan:
    """Run extra temperatures and merge their records (for exponent fits)."""
    params = ModelParams(**scan.params)
    coupling = CouplingSequence.from_dict(scan.coupling)
    lv = ExitLevels(params, coupling, n_max or scan.n_levels, num)
    fit_start = _fit_start(params, coupling)
    known = {r["T"] for r in scan.records}
    for T in temps:
        if float(T) not in known:
            scan.records.append(_record_dict(lv.record(T), coupling, fit_start))
    scan.records.sort(key=lambda r: r["T"])
    return scan


# ----------------------------------------------------------------------
# exponent fits


@dataclass
class PowerFit:
    slope: float
    intercept: float
    rms: float
    n_points: int
    window: tuple


def _loglog(x, y, window, min_pts, what):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    good = (x > 0) & (y > 0)
    x, y = x[good], y[good]
    if x.size == 0:
        raise InsufficientPoints(f"no usable points for {what}")
    if window is None:
        window = (0.1 * x.max(), 0.9 * x.max())
    sel = (x >= window[0]) & (x <= window[1])
    if sel.sum() < min_pts:
        raise InsufficientPoints(f"{what}: {int(sel.sum())} points in window, need {min_pts}")
    lx, ly = np.log(x[sel]), np.log(y[sel])
    slope, icpt = np.polyfit(lx, ly, 1)
    rms = float(np.sqrt(np.mean((slope * lx + icpt - ly) ** 2)))
    return PowerFit(float(slope), float(icpt), rms, int(sel.sum()), tuple(window))


def magnetization_exponent(scan: CriticalScan, T_window: tuple | None = None) -> PowerFit:
    """Slope of log M(T) against log(T_c - T), M(T) = sqrt(T) M_inf(T).

    ``T_window`` bounds T_c - T; the default keeps [0.1, 0.9] of the range.
    """
    pts = [(scan.Tc - r["T"], math.sqrt(r["T"]) * r["M_inf"]) for r in scan.records
           if r.get("M_inf") is not None and r["T"] < scan.Tc]
    if not pts:
        raise InsufficientPoints("no temperatures below T_c with an M_inf estimate")
    x, y = zip(*pts)
    fit = _loglog(x, y, T_window, 6, "magnetization fit")
    scan.exponents["magnetization"] = asdict(fit)
    return fit


@dataclass
class ExitScaling:
    dT: list
    S: list
    ratios: list

    @property
    def band(self) -> float:
        return max(self.ratios) / min(self.ratios)


def exit_scaling(scan: CriticalScan, coupling: CouplingSequence,
                 dT_window: tuple | None = None) -> ExitScaling:
    """(T - T_c) / sum_{k >= nbar(T)} 1/c^(k) over the records above T_c.

    ``dT_window`` restricts T - T_c, e.g. to one decade.
    """
    lo, hi = dT_window or (0.0, math.inf)
    dT, S, ratios = [], [], []
    for r in scan.records:
        if r["T"] > scan.Tc and r["nbar"] is not None and lo <= r["T"] - scan.Tc <= hi:
            s = inv_c_tail(coupling, r["nbar"])
            dT.append(r["T"] - scan.Tc)
            S.append(s)
            ratios.append((r["T"] - scan.Tc) / s)
    if len(ratios) < 2:
        raise InsufficientPoints("need two exit levels above T_c")
    out = ExitScaling(dT, S, ratios)
    scan.exponents["exit_scaling_band"] = out.band
    return out


# ----------------------------------------------------------------------
# finite-difference derivative checks


@dataclass
class DerivativeReport:
    T: float
    dT: float
    levels: list
    dM: list                 # dM_n/dT with step dT
    dM_half: list            # the same with step dT/2
    sign_ok: bool
    step_change: float       # max relative change between dT and dT/2
    part_a: list             # -dM_{n+1}/dT * sqrt(kappa) T^2 for n + 1 <= N
    part_b_dev: list         # ratio - 1 - 1/(4 c M^2), n >= N
    part_b_band: list        # beta_{n+1} beta_n / (c^(n+1) c^(n))
    part_b_levels: list

    @property
    def part_b_ok(self) -> bool:
        return all(abs(d) <= 10 * b for d, b in zip(self.part_b_dev, self.part_b_band))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["part_b_ok"] = self.part_b_ok
        return out


def _m_profile(params, coupling, T, n_levels, num):
    tr = run(replace(params, T=T), coupling, n_levels, num, keep="last")
    return tr.rows


def dM_dT_check(params: ModelParams, coupling: CouplingSequence, T: float, n_levels: int,
                dT: float | None = None, num: Numerics = DEFAULT_NUMERICS) -> DerivativeReport:
    """Central differences of M_n(T) at steps dT and dT/2."""
    dT = 1e-3 * T if dT is None else dT
    base = _m_profile(params, coupling, T, n_levels, num)
    low = [row["n"] for row in base if row["region"] == LOW]
    rows = {h: (_m_profile(params, coupling, T + h, n_levels, num),
                _m_profile(params, coupling, T - h, n_levels, num)) for h in (dT, dT / 2)}

    def deriv(h):
        up, dn = rows[h]
        m = min(len(up), len(dn), len(base))
        return [(up[n]["M_n"] - dn[n]["M_n"]) / (2 * h) for n in range(m)]

    d1, d2 = deriv(dT), deriv(dT / 2)
    levels = [n for n in low if n < len(d1) and n < len(d2)]
    dM = [d1[n] for n in levels]
    dM_half = [d2[n] for n in levels]
    change = max(abs(a - b) / abs(b) for a, b in zip(dM, dM_half) if b != 0)
    sign_ok = all(v < 0 for v in dM_half)
    N = _fit_start(params, coupling)
    part_a = [-d2[n + 1] * math.sqrt(params.kappa) * T ** 2
              for n in levels if N is not None and n + 1 <= N and n + 1 < len(d2)]
    dev, band, blev = [], [], []
    if N is not None:
        for n in levels:
            if n < N or n + 1 >= len(d2) or n + 1 not in levels:
                continue
            bn, bn1 = base[n]["beta_n"], base[n + 1]["beta_n"]
            if bn is None or bn1 is None:
                continue
            cn, cn1 = base[n]["c_big"], base[n + 1]["c_big"]
            ratio = d2[n + 1] / d2[n]
            dev.append(ratio - 1 - 1 / (4 * cn * base[n]["M_n"] ** 2))
            band.append(bn1 * bn / (cn1 * cn))
            blev.append(n)
    return DerivativeReport(T=T, dT=dT, levels=levels, dM=dM, dM_half=dM_half,
                            sign_ok=sign_ok, step_change=change, part_a=part_a,
                            part_b_dev=dev, part_b_band=band, part_b_levels=blev)


# ----------------------------------------------------------------------
# geometry near T_c


@dataclass
class NearCriticalGeometry:
    T: float
    levels: list
    mean_abs: list      # E|x| under the density of y / Mbar_n
    var_abs: list       # Var |x| under the same density
    Mbar: list
    L: list             # ((r-1)/6 sum_{j>=n} 1/l_j)^(1/2)

    @property
    def ratio(self) -> list:
        return [m / l for m, l in zip(self.Mbar, self.L)]

    @property
    def var_decreasing(self) -> bool:
        return all(b < a for a, b in zip(self.var_abs, self.var_abs[1:]))

    @property
    def ratio_toward_one(self) -> bool:
        gaps = [abs(q - 1) for q in self.ratio]
        return all(b < a for a, b in zip(gaps, gaps[1:]))

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(ratio=self.ratio, var_decreasing=self.var_decreasing,
                   ratio_toward_one=self.ratio_toward_one)
        return out


def near_critical_geometry(params: ModelParams, coupling: CouplingSequence, T: float,
                           n_levels: int, last: int = 5,
                           num: Numerics = DEFAULT_NUMERICS) -> NearCriticalGeometry:
    """Shape of p_n rescaled by Mbar_n over the final ``last`` levels of a run at T."""
    tr = run(replace(params, T=T), coupling, n_levels, num, keep=last)
    geo = NearCriticalGeometry(T=T, levels=[], mean_abs=[], var_abs=[], Mbar=[], L=[])
    for n in sorted(tr.states):
        st = tr.states[n]
        p = to_p(st)
        x = p.x / st.Mbar
        w = sphere_area(p.r) * p.x ** (p.r - 1) * p.values
        h = p.grid.h
        mass = simpson(w, dx=h)
        mu = simpson(x * w, dx=h) / mass
        var = simpson((x - mu) ** 2 * w, dx=h) / mass
        geo.levels.append(n)
        geo.mean_abs.append(float(mu))
        geo.var_abs.append(float(var))
        geo.Mbar.append(st.Mbar)
        geo.L.append(math.sqrt((p.r - 1) / 6 * inv_l_tail(coupling, n)))
    return geo
