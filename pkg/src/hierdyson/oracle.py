"""Ground truth at small volume: the lattice model itself.

Nothing here goes through the renormalization code: the Hamiltonian is
built site by site from the hierarchical distance, p_1 comes from a
Cartesian quadrature of the two-spin Gibbs integral, and larger volumes are
sampled with Metropolis.
"""

from __future__ import annotations

import io
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.integrate import quad

from .coupling import CouplingSequence
from .radial import FULL, RadialDensity, RadialGrid, sphere_area
from .rg_flow import ModelParams


class AutotuneFailed(RuntimeError):
    pass


class NonErgodic(UserWarning):
    pass


def hier_distance(j: int, k: int) -> int:
    if j < 1 or k < 1:
        raise ValueError("sites are numbered from 1")
    if j == k:
        return 0
    n = 0
    while (j - 1) >> n != (k - 1) >> n:
        n += 1
    return 2 ** (n - 1)


@dataclass(frozen=True)
class HierVolume:
    n: int
    r: int
    coupling: CouplingSequence
    T: float
    scale: float = 1.0   # multiplies every coupling; 0 decouples the sites

    @property
    def sites(self) -> int:
        return 2 ** self.n

    def couplings(self) -> np.ndarray:
        """Symmetric J(j,k) = l(d) / d^2 with l(d) = l_{log2 d}, zero diagonal."""
        m = self.sites
        J = np.zeros((m, m))
        for j in range(1, m + 1):
            for k in range(j + 1, m + 1):
                d = hier_distance(j, k)
                J[j - 1, k - 1] = J[k - 1, j - 1] = self.coupling.l(int(math.log2(d))) / d ** 2
        return self.scale * J


def hamiltonian(vol: HierVolume, config) -> float:
    s = np.asarray(config, dtype=float)
    if s.shape != (vol.sites, vol.r):
        raise ValueError(f"config must have shape ({vol.sites}, {vol.r})")
    G = s @ s.T
    return -0.5 * float(np.sum(vol.couplings() * G))


# ----------------------------------------------------------------------
# single-site density


def log_single_site(x2, params: ModelParams):
    """log of the free density (up to its constant) at |x|^2 = x2."""
    x2 = np.asarray(x2, dtype=float)
    return np.log1p(params.eps(x2)) - x2 / 2 - params.kappa * x2 ** 2 / 4


def single_site_moment(params: ModelParams, k: int) -> float:
    """E|sigma|^k under the free density, by 1-D quadrature."""
    r = params.r

    def dens(rho, extra):
        return rho ** (r - 1 + extra) * math.exp(float(log_single_site(rho * rho, params)))

    num = quad(dens, 0, np.inf, args=(k,), epsabs=0, epsrel=1e-12, limit=200)[0]
    den = quad(dens, 0, np.inf, args=(0,), epsabs=0, epsrel=1e-12, limit=200)[0]
    return num / den


# ----------------------------------------------------------------------
# direct two-spin quadrature


def direct_p1(params: ModelParams, coupling: CouplingSequence, n_u: int = 401,
              rho_nodes: int = 301, rho=None):
    """p_1 from the two-spin Gibbs integral on a Cartesian grid (r = 2).

    With ``rho`` given the unnormalized values at those radii are returned
    (scaled to peak one) instead of a RadialDensity.

    p_1(m) is proportional to int p(m+u) p(m-u) exp((|m|^2 - |u|^2) l_0 / T) du,
    since sigma_1 . sigma_2 = |m|^2 - |u|^2 for sigma = m +- u.
    """
    if params.r != 2:
        raise ValueError("direct quadrature is implemented for r = 2")
    T = params.T
    J = coupling.l(0)
    uniform = rho is None

    def logdens(x2):
        return log_single_site(x2, params)

    # radial extent of the single-spin law
    R = 1.0
    while logdens(R * R) + J * R * R / T > -80.0 + logdens(0.0) or R < 3:
        R *= 1.25
    u1 = np.linspace(-R, R, n_u)
    du = u1[1] - u1[0]
    U1, U2 = np.meshgrid(u1, u1, indexing="ij")
    U2sq = U1 ** 2 + U2 ** 2
    rho = np.linspace(0, R, rho_nodes) if rho is None else np.asarray(rho, dtype=float)
    logs = np.empty(rho.size)
    for i, m in enumerate(rho):
        a2 = (m + U1) ** 2 + U2 ** 2
        b2 = (m - U1) ** 2 + U2 ** 2
        expo = logdens(a2) + logdens(b2) + J * (m * m - U2sq) / T
        top = expo.max()
        logs[i] = top + math.log(np.sum(np.exp(expo - top)) * du * du)
    vals = np.exp(logs - logs.max())
    if not uniform:
        return vals
    grid = RadialGrid(h=rho[1] - rho[0], m=rho.size)
    return RadialDensity(grid, vals, 2, FULL).normalized()


# ----------------------------------------------------------------------
# Monte Carlo


@dataclass
class McEstimate:
    name: str
    value: float
    stderr: float
    sweeps: int
    seed: int


@dataclass
class McResult:
    estimates: dict
    hist_edges: np.ndarray
    hist: np.ndarray            # probability per bin
    hist_stderr: np.ndarray
    acceptance: float
    step: float
    sweeps: int
    seed: int
    batches: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        out = {k: {"value": e.value, "stderr": e.stderr} for k, e in self.estimates.items()}
        out.update(sweeps=self.sweeps, seed=self.seed, acceptance=self.acceptance,
                   step=self.step, batches=self.batches)
        return json.dumps(out, indent=2, sort_keys=True)

    def hist_csv(self) -> str:
        buf = io.StringIO()
        buf.write("lo,hi,prob,stderr\n")
        for a, b, p, s in zip(self.hist_edges[:-1], self.hist_edges[1:], self.hist, self.hist_stderr):
            buf.write(f"{a:.17g},{b:.17g},{p:.17g},{s:.17g}\n")
        return buf.getvalue()


@njit(cache=True)
def _logp(x2, kappa, eps):
    e = 0.0
    p = 1.0
    for k in range(eps.size):
        e += eps[k] * p
        p *= x2
    return math.log1p(e) - x2 / 2 - kappa * x2 * x2 / 4


@njit(cache=True)
def _chunk(spins, J, beta, kappa, eps, step, normals, kinds, accepts, angles,
           m2_out, m4_out, rad_out, counts):
    n_sw, ns, r = normals.shape
    for s in range(n_sw):
        for j in range(ns):
            old = spins[j].copy()
            new = old.copy()
            if kinds[s, j] < 0.5:
                for a in range(r):
                    new[a] = old[a] + step * normals[s, j, a]
                kind = 0
            else:
                # rotate in a random coordinate plane; the norm is kept
                a = int(kinds[s, j] * 2 * r * (r - 1)) % (r * (r - 1))
                p = a // (r - 1)
                q = a % (r - 1)
                if q >= p:
                    q += 1
                th = angles[s, j]
                cs, sn = math.cos(th), math.sin(th)
                new[p] = cs * old[p] - sn * old[q]
                new[q] = sn * old[p] + cs * old[q]
                kind = 1
            field_dot = 0.0
            for k in range(ns):
                if k != j:
                    for a in range(r):
                        field_dot += J[j, k] * (new[a] - old[a]) * spins[k, a]
            x2n = 0.0
            x2o = 0.0
            for a in range(r):
                x2n += new[a] * new[a]
                x2o += old[a] * old[a]
            dlog = beta * field_dot + _logp(x2n, kappa, eps) - _logp(x2o, kappa, eps)
            counts[2 * kind] += 1
            if dlog >= 0 or accepts[s, j] < math.exp(dlog):
                spins[j] = new
                counts[2 * kind + 1] += 1
        m2 = 0.0
        for a in range(r):
            ma = 0.0
            for j in range(ns):
                ma += spins[j, a]
            ma /= ns
            m2 += ma * ma
        m2_out[s] = m2
        m4_out[s] = m2 * m2
        rad_out[s] = math.sqrt(m2)


def _run_chunks(rng, spins, J, beta, kappa, eps, step, n_sweeps, chunk=20000):
    ns, r = spins.shape
    m2 = np.empty(n_sweeps)
    m4 = np.empty(n_sweeps)
    rad = np.empty(n_sweeps)
    counts = np.zeros(4, dtype=np.int64)
    done = 0
    while done < n_sweeps:
        k = min(chunk, n_sweeps - done)
        normals = rng.standard_normal((k, ns, r))
        kinds = rng.random((k, ns))
        accepts = rng.random((k, ns))
        angles = rng.uniform(-math.pi, math.pi, (k, ns))
        _chunk(spins, J, beta, kappa, eps, step, normals, kinds, accepts, angles,
               m2[done:done + k], m4[done:done + k], rad[done:done + k], counts)
        done += k
    return m2, m4, rad, counts


def _batch_stats(x: np.ndarray, batches: int):
    n = (x.size // batches) * batches
    means = x[:n].reshape(batches, -1).mean(axis=1)
    return float(means.mean()), float(means.std(ddof=1) / math.sqrt(batches)), means


def mc_sample(vol: HierVolume, params: ModelParams, sweeps: int, seed: int,
              batches: int = 50, hist_edges: np.ndarray | None = None,
              target=(0.3, 0.6)) -> McResult:
    """Metropolis sampling of the 2^n-spin Gibbs measure.

    The first 20% of sweeps are burn-in; the displacement step is tuned
    there only, so the production chain is a fixed Markov kernel.
    """
    if vol.n > 4:
        raise ValueError("sampling is meant for n <= 4")
    if batches < 20:
        raise ValueError("need at least 20 batches")
    rng = np.random.Generator(np.random.PCG64(seed))
    J = vol.couplings()
    beta = 1.0 / vol.T
    eps = np.asarray(params.eps_poly if params.eps_poly else (0.0,), dtype=float)
    spins = rng.standard_normal((vol.sites, vol.r))
    burn = max(sweeps // 5, 1000)
    step = 1.0
    rounds = max(burn // 1000, 1)
    for _ in range(rounds):
        _, _, _, counts = _run_chunks(rng, spins, J, beta, params.kappa, eps, step, 1000)
        acc = counts[1] / max(counts[0], 1)
        if acc < target[0]:
            step *= 0.7
        elif acc > target[1]:
            step *= 1.3
    _, _, _, counts = _run_chunks(rng, spins, J, beta, params.kappa, eps, step, 2000)
    acc = counts[1] / max(counts[0], 1)
    if not target[0] <= acc <= target[1]:
        raise AutotuneFailed(f"displacement acceptance {acc:.3f} after tuning")
    m2, m4, rad, counts = _run_chunks(rng, spins, J, beta, params.kappa, eps, step, sweeps)
    est = {}
    for name, series in (("m2", m2), ("m4", m4)):
        mean, se, means = _batch_stats(series, batches)
        est[name] = McEstimate(name, mean, se, sweeps, seed)
        # stationarity heuristic: first and second half of the batches agree
        h = batches // 2
        d = abs(means[:h].mean() - means[h:].mean())
        spread = means.std(ddof=1) * math.sqrt(2.0 / h)
        if d > 5 * spread:
            warnings.warn(f"{name}: batch halves differ by {d / spread:.1f} sigma", NonErgodic)
    mean_m2, se_m2 = est["m2"].value, est["m2"].stderr
    est["Mbar"] = McEstimate("Mbar", math.sqrt(mean_m2), se_m2 / (2 * math.sqrt(mean_m2)), sweeps, seed)
    if hist_edges is None:
        hist_edges = np.linspace(0, rad.max() * 1.0001, 31)
    n_use = (rad.size // batches) * batches
    idx = np.clip(np.searchsorted(hist_edges, rad[:n_use], side="right") - 1, -1, hist_edges.size - 1)
    per_batch = np.zeros((batches, hist_edges.size - 1))
    bsize = n_use // batches
    for b in range(batches):
        sl = idx[b * bsize:(b + 1) * bsize]
        ok = (sl >= 0) & (sl < hist_edges.size - 1)
        per_batch[b] = np.bincount(sl[ok], minlength=hist_edges.size - 1) / bsize
    hist = per_batch.mean(axis=0)
    hist_se = per_batch.std(axis=0, ddof=1) / math.sqrt(batches)
    return McResult(
        estimates=est, hist_edges=np.asarray(hist_edges), hist=hist, hist_stderr=hist_se,
        acceptance=float(counts[1] / max(counts[0], 1)), step=step, sweeps=sweeps,
        seed=seed, batches=batches,
        extra={"rotation_acceptance": float(counts[3] / max(counts[2], 1))},
    )


def radial_bin_probs(p: RadialDensity, edges: np.ndarray) -> np.ndarray:
    """Probability of |x| in each bin under a radial density on R^r."""
    from scipy.interpolate import CubicSpline

    y = sphere_area(p.r) * p.x ** (p.r - 1) * p.values
    F = CubicSpline(p.x, y).antiderivative()
    e = np.clip(edges, p.grid.x_min, p.grid.x_max)
    cdf = F(e) - F(p.grid.x_min)
    return np.diff(cdf) / (F(p.grid.x_max) - F(p.grid.x_min))


def histogram_chi2(mc: McResult, probs: np.ndarray, min_se: float = 1e-12):
    """(chi2, dof) of the Monte Carlo histogram against predicted bin masses."""
    keep = mc.hist_stderr > min_se
    z = (mc.hist[keep] - probs[keep]) / mc.hist_stderr[keep]
    return float(np.sum(z ** 2)), int(keep.sum())
