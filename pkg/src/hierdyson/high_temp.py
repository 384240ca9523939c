"""High-temperature side: rescaled densities, moment tracking, Gaussian limit."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .radial import FULL, RadialDensity, RadialGrid, mass_full, moment_full
from .rg_flow import DEFAULT_NUMERICS, HIGH, FlowState, Numerics, Trajectory, step


class NotInHighRegion(ValueError):
    pass


class DegenerateDensity(ArithmeticError):
    pass


def h_of_q(state: FlowState) -> RadialDensity:
    """h_n(x) = c^{-r/2} q_n(x / sqrt(c)), c = c^(n)."""
    c = state.c_n
    if not c > 0:
        raise ValueError("c^(n) must be positive")
    q = state.q.normalized()
    s = math.sqrt(c)
    grid = RadialGrid(h=q.grid.h * s, m=q.grid.m, x_min=q.grid.x_min * s)
    return RadialDensity(grid, q.values * c ** (-q.r / 2), q.r, FULL)


def _radial_cdf(d: RadialDensity):
    """Exact antiderivative of a cubic spline through x^{r-1} d(x), scaled to 1."""
    y = d.x ** (d.r - 1) * d.values
    spl = CubicSpline(d.x, y).antiderivative()
    total = spl(d.x[-1]) - spl(d.x[0])
    return lambda x: (spl(np.clip(x, d.x[0], d.x[-1])) - spl(d.x[0])) / total


def gaussian_distance(state_or_density, floor: float = 1e-250) -> float:
    """Distance of the radial law from an isotropic Gaussian.

    Both ingredients are scale invariant, so the 2^{-n/2} rescaling of the
    level-n density does not change them and is skipped.
    """
    d = state_or_density.q if isinstance(state_or_density, FlowState) else state_or_density
    d = d.normalized()
    m0 = mass_full(d)
    m2 = moment_full(d, 2) / m0
    if not m2 > floor:
        raise DegenerateDensity(f"second moment {m2:.3e} below floor")
    m4 = moment_full(d, 4) / m0
    r = d.r
    dist = abs(m4 / m2 ** 2 - (r + 2) / r)
    if r == 2:
        cdf = _radial_cdf(d)
        xs = np.linspace(d.grid.x_min, d.grid.x_max, 4 * d.grid.m)
        s2 = m2 / 2
        ray = 1 - np.exp(-xs ** 2 / (2 * s2))
        dist = max(dist, float(np.max(np.abs(cdf(xs) - ray))))
    return dist


@dataclass
class HighObservables:
    entry: int
    levels: list = field(default_factory=list)
    M2: list = field(default_factory=list)
    M4: list = field(default_factory=list)
    sigma2: list = field(default_factory=list)
    gauss_dist: list = field(default_factory=list)
    chi_est: list = field(default_factory=list)
    log_chi: list = field(default_factory=list)
    chi_sigma: list = field(default_factory=list)
    contraction: list = field(default_factory=list)
    cauchy: list = field(default_factory=list)

    @property
    def sigma2_limit(self) -> float:
        return self.sigma2[-1]

    @property
    def sigma2_band(self) -> tuple[float, float]:
        tail = self.sigma2[-5:]
        return min(tail), max(tail)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("n,l,M2,M4,sigma2,gauss_dist,chi_est\n")
        for k, n in enumerate(self.levels):
            vals = [self.M2[k], self.M4[k], self.sigma2[k], self.gauss_dist[k], self.chi_est[k]]
            buf.write(f"{n},{k}," + ",".join(f"{v:.17g}" for v in vals) + "\n")
        return buf.getvalue()


def track_high_moments(traj: Trajectory, extra_levels: int = 0,
                       num: Numerics = DEFAULT_NUMERICS) -> HighObservables:
    """Moments of h_{entry+l} from the first High level on.

    When ``extra_levels`` > 0 the flow is continued past the last stored
    level so the sequence has some length to it.
    """
    entry = next((row["n"] for row in traj.rows if row["region"] == HIGH), None)
    if entry is None:
        raise NotInHighRegion("trajectory never meets the high threshold")
    states = [traj.states[n] for n in sorted(traj.states) if n >= entry]
    if not states or states[0].n != entry:
        raise NotInHighRegion("entry-level state was not retained")
    st = states[-1]
    for _ in range(extra_levels):
        st = step(st, traj.params, traj.coupling, num)
        states.append(st)
    obs = HighObservables(entry=entry)
    c_entry = states[0].c_n
    T = traj.params.T
    for l, s in enumerate(states):
        h = h_of_q(s)
        m0 = mass_full(h)
        M2 = moment_full(h, 2) / m0
        M4 = moment_full(h, 4) / m0
        sig = 2.0 ** l * (c_entry / s.c_n) * M2
        obs.levels.append(s.n)
        obs.M2.append(M2)
        obs.M4.append(M4)
        obs.sigma2.append(sig)
        obs.gauss_dist.append(gaussian_distance(h))
        obs.chi_est.append(s.chi_est)
        obs.log_chi.append(s.log_chi)
        log_chi = entry * math.log(2.0) + math.log(T * sig / c_entry)
        obs.chi_sigma.append(math.exp(log_chi) if log_chi < 700 else math.inf)
    eta_star = max(obs.M2[0], obs.M4[0])
    for l in range(len(states) - 1):
        cratio = states[l + 1].c_n / states[l].c_n
        bound = cratio / 2 * (1 + 10 * math.sqrt(eta_star) * (5 / 6) ** l) * obs.M2[l]
        obs.contraction.append(obs.M2[l + 1] <= bound)
        jump = abs(obs.sigma2[l + 1] - obs.sigma2[l])
        obs.cauchy.append(jump <= 5 * eta_star * 0.75 ** l)
    return obs
