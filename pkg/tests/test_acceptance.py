"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION k: PASS|FAIL`` line (collected in the
terminal summary as well) and then asserts the verdict.  Expensive
computations are cached per resolution so the resolution-doubling test can
reuse the base results.
"""

import functools
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from hierdyson import critical as crit
from hierdyson import fixed_point as fp
from hierdyson import high_temp as ht
from hierdyson import oracle as oc
from hierdyson import rg_flow as rg
from hierdyson.coupling import CouplingSequence, n_of_eta
from hierdyson.radial import moment_full

# Tolerances, one per stated bound.
GAUSS_DIST_MAX = 1e-5
VAR_RATIO_RTOL = 1e-6
C1_SECONDS = 30
MC_SWEEPS = 1_000_000
MC_Z_MAX = 3.0
C2_SECONDS = 600
FP_RESIDUAL_MAX = 1e-10
K2, K3, K_TOL = 0.25, -1 / 6, 1e-6
LEFT_RATE_BAND = (1.8, 2.0)
PI_TOL = 1e-8
C3_SECONDS = 60
C4_TEMPS = (0.05, 0.2, 1.0, 5.0, 10.0)
CHI_RTOL = 1e-6
C4_N_MAX = 40
M_INF_FACTOR = 2.0
C4_SECONDS = 600
DECREMENT_BAND = (-1.0, -1.0 / 8)
RATIO_BAND = (0.5, 2.0)
INCREMENT_BAND = 4.0
SLOPE_BAND = (0.4, 0.6)
EXIT_BAND = 10.0
C6_SECONDS = 3600
MEAN_ABS_TOL = 0.05
PART_B_FACTOR = 10.0
C8_TEMPS = (0.3, 0.5, 0.7)
C8_SECONDS = 900
DOUBLING_RTOL = 1e-4
DOUBLING_RTOL_MC = 1e-2

REF = CouplingSequence(form="polylog", a=0.01, lam=1.5)
REF_PARAMS = rg.ModelParams(r=2, kappa=0.05, T=0.5, eta=0.1)
LOW_COUPLING = CouplingSequence(form="polylog", a=0.4, lam=1.5)
LOW_PARAMS = rg.ModelParams(r=2, kappa=0.05, T=0.05, eta=0.1)
CONST_PARAMS = rg.ModelParams(r=2, kappa=0.9, T=1.0, eta=0.1)
CHEAP = rg.Numerics(quad_u=32, quad_rho=32, pts_per_scale=8)
SEED = 20240611


def report(k, ok, **details):
    body = ", ".join(f"{key}={val}" for key, val in details.items())
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'}  {body}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def _fmt(x):
    return f"{x:.6g}"


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


# ----------------------------------------------------------------------
# 1. Gaussian closure


@functools.lru_cache(maxsize=None)
def gaussian_closure(num):
    t0 = time.time()
    par = rg.ModelParams(kappa=0.5, T=2.0)
    cp = CouplingSequence()
    st = rg.make_state(rg.gaussian_profile(2, 1.0, num.pts_per_scale), 0, par, cp)
    dists, ratios = [], []
    for _ in range(10):
        nxt = rg.step(st, par, cp, num)
        dists.append(ht.gaussian_distance(nxt))
        ratios.append(moment_full(nxt.q, 2) / moment_full(st.q, 2))
        st = nxt
    return {"dist": dists, "ratio": ratios, "seconds": time.time() - t0}


def test_criterion_1_gaussian_closure():
    res = gaussian_closure(rg.DEFAULT_NUMERICS)
    worst_ratio = max(abs(r / 0.5 - 1) for r in res["ratio"])
    ok = (max(res["dist"]) < GAUSS_DIST_MAX and worst_ratio < VAR_RATIO_RTOL
          and res["seconds"] < C1_SECONDS)
    assert report(1, ok, max_gauss_dist=_fmt(max(res["dist"])),
                  max_var_ratio_err=_fmt(worst_ratio), seconds=_fmt(res["seconds"]))


# ----------------------------------------------------------------------
# 2. Monte Carlo oracle

C2_CASES = [(n, T) for n in (1, 2) for T in (0.5, 2.0, 5.0)]


@functools.lru_cache(maxsize=None)
def flow_density(n, T, num):
    tr = rg.run(replace(REF_PARAMS, T=T), REF, n, num)
    st = tr.states[n]
    return st.Mbar, rg.to_p(st)


@functools.lru_cache(maxsize=None)
def mc_case(n, T, seed):
    par = replace(REF_PARAMS, T=T)
    return oc.mc_sample(oc.HierVolume(n, 2, REF, T), par, MC_SWEEPS, seed)


def compare_case(n, T, num):
    k = C2_CASES.index((n, T))
    mc = mc_case(n, T, SEED + k)
    mbar_flow, p = flow_density(n, T, num)
    est = mc.estimates["Mbar"]
    z_m = (est.value - mbar_flow) / est.stderr
    probs = oc.radial_bin_probs(p, mc.hist_edges)
    chi2, dof = oc.histogram_chi2(mc, probs)
    keep = mc.hist_stderr > 1e-12
    z_bins = (mc.hist[keep] - probs[keep]) / mc.hist_stderr[keep]
    return {"z_mbar": z_m, "chi2": chi2, "dof": dof,
            "z_hist": (chi2 - dof) / math.sqrt(2 * dof),
            "max_bin_z": float(np.max(np.abs(z_bins))), "mbar_flow": mbar_flow}


def test_criterion_2_oracle_equivalence():
    t0 = time.time()
    rows = {case: compare_case(*case, rg.DEFAULT_NUMERICS) for case in C2_CASES}
    seconds = time.time() - t0
    ok = seconds < C2_SECONDS
    for (n, T), r in rows.items():
        ok &= abs(r["z_mbar"]) <= MC_Z_MAX and r["z_hist"] <= MC_Z_MAX
        print(f"  n={n} T={T}: z(Mbar)={r['z_mbar']:+.2f} chi2={r['chi2']:.1f}/{r['dof']}"
              f" z(hist)={r['z_hist']:+.2f} max|z_bin|={r['max_bin_z']:.2f}")
    assert report(2, ok, max_z_mbar=_fmt(max(abs(r["z_mbar"]) for r in rows.values())),
                  max_z_hist=_fmt(max(r["z_hist"] for r in rows.values())),
                  max_bin_z=_fmt(max(r["max_bin_z"] for r in rows.values())),
                  seconds=_fmt(seconds))


# ----------------------------------------------------------------------
# 3. fixed point


@functools.lru_cache(maxsize=None)
def fixed_point_result(n_freq, xi_max):
    t0 = time.time()
    sol = fp.solve_g(2, fp.FrequencyGrid(n=n_freq, xi_max=xi_max))
    rate, _ = fp.tail_rates(sol)
    pi = fp.build_pi(sol)
    return {"residual": sol.residual, "k2": sol.cumulants["k2"], "k3": sol.cumulants["k3"],
            "left_rate": rate, "pi_mass": pi.mass, "pi_mean": pi.mean,
            "seconds": time.time() - t0}


def test_criterion_3_fixed_point():
    r = fixed_point_result(2 ** 14, 256.0)
    checks = {
        "residual": r["residual"] < FP_RESIDUAL_MAX,
        "k2": abs(r["k2"] - K2) <= K_TOL,
        "k3": abs(r["k3"] - K3) <= K_TOL,
        "left_rate": LEFT_RATE_BAND[0] <= r["left_rate"] <= LEFT_RATE_BAND[1],
        "pi_mass": abs(r["pi_mass"] - 1) <= PI_TOL,
        "pi_mean": abs(r["pi_mean"]) <= PI_TOL,
        "runtime": r["seconds"] < C3_SECONDS,
    }
    failed = [k for k, v in checks.items() if not v]
    assert report(3, not failed, residual=_fmt(r["residual"]), k2=_fmt(r["k2"]),
                  k3=_fmt(r["k3"]), left_rate=_fmt(r["left_rate"]),
                  pi_mass_err=_fmt(r["pi_mass"] - 1), pi_mean=_fmt(r["pi_mean"]),
                  seconds=_fmt(r["seconds"]), failed=failed or "none")


# ----------------------------------------------------------------------
# 4. dichotomy


@functools.lru_cache(maxsize=None)
def constant_run(T, num):
    par = rg.ModelParams(r=2, kappa=0.9, T=T, eta=0.1)
    tr = rg.run(par, CouplingSequence(), 100_000, num, keep=2)
    obs = ht.track_high_moments(tr, extra_levels=12, num=num)
    lc = obs.log_chi
    # chi itself overflows at low T, so drifts are taken on log chi
    return {"termination": tr.termination, "levels": tr.rows[-1]["n"],
            "log_chi": lc[-1], "chi_drift": math.expm1(abs(lc[-1] - lc[-2]))}


@functools.lru_cache(maxsize=None)
def low_run(num):
    tr = rg.run(LOW_PARAMS, LOW_COUPLING, C4_N_MAX, num)
    M = [row["M_n"] for row in tr.rows]
    N = n_of_eta(LOW_COUPLING, LOW_PARAMS.eta)
    M2_inf, b, _ = crit.m_inf_fit(M, LOW_COUPLING, N)
    S = np.array([crit.inv_c_tail(LOW_COUPLING, n) for n in range(len(M))])
    ratio = (np.array(M) ** 2 - M2_inf) / ((LOW_PARAMS.r - 1) / 2 * S)
    return {"traj": tr, "M2_inf": M2_inf, "b": b, "ratio": ratio,
            "regions": set(tr.regions), "termination": tr.termination}


def test_criterion_4_dichotomy():
    t0 = time.time()
    const = {T: constant_run(T, CHEAP) for T in C4_TEMPS}
    low = low_run(rg.DEFAULT_NUMERICS)
    seconds = time.time() - t0
    const_ok = all(r["termination"] == rg.REACHED_HIGH and r["chi_drift"] < CHI_RTOL
                   for r in const.values())
    for T, r in const.items():
        print(f"  constant T={T}: {r['termination']} at n={r['levels']}, "
              f"log chi={r['log_chi']:.10g}, last relative change {r['chi_drift']:.2e}")
    ratio = low["ratio"]
    low_ok = (low["regions"] == {rg.LOW} and low["termination"] == rg.MAX_LEVEL
              and np.all(ratio >= 1 / M_INF_FACTOR) and np.all(ratio <= M_INF_FACTOR))
    ok = const_ok and low_ok and seconds < C4_SECONDS
    assert report(4, ok, constant_all_high=const_ok,
                  max_chi_drift=_fmt(max(r["chi_drift"] for r in const.values())),
                  polylog_low_through=C4_N_MAX, M_inf=_fmt(math.sqrt(low["M2_inf"])),
                  tail_ratio_range=f"[{_fmt(ratio.min())}, {_fmt(ratio.max())}]",
                  seconds=_fmt(seconds))


# ----------------------------------------------------------------------
# 5. decrement law


def decrement_stats(num):
    low = low_run(num)
    rows = low["traj"].rows
    from hierdyson.low_temp import detect_N1
    N1 = detect_N1(low["traj"])
    scaled, ratios = [], []
    for n in range(N1, len(rows) - 1):
        c = rows[n]["c_big"]
        d = rows[n + 1]["M_n"] ** 2 - rows[n]["M_n"] ** 2
        scaled.append(c * d)
        beta = rows[n]["beta_n"]
        if beta is not None and beta / c < LOW_PARAMS.eta / 10:
            ratios.append(d / (-(LOW_PARAMS.r - 1) / (2 * c)))
    return N1, np.array(scaled), np.array(ratios)


def test_criterion_5_decrement_law():
    N1, scaled, ratios = decrement_stats(rg.DEFAULT_NUMERICS)
    ok = (N1 is not None and scaled.size > 0 and ratios.size > 0
          and np.all(scaled >= DECREMENT_BAND[0]) and np.all(scaled <= DECREMENT_BAND[1])
          and np.all(ratios >= RATIO_BAND[0]) and np.all(ratios <= RATIO_BAND[1]))
    assert report(5, ok, N1=N1, steps=scaled.size,
                  c_dM2_range=f"[{_fmt(scaled.min())}, {_fmt(scaled.max())}]",
                  ratio_range=f"[{_fmt(ratios.min())}, {_fmt(ratios.max())}]",
                  ratio_steps=ratios.size)


# ----------------------------------------------------------------------
# 6. critical scan

N_REF = n_of_eta(REF, REF_PARAMS.eta)
SCAN_LEVELS = N_REF + 40
SCAN_TOL = 1e-6
MAG_OFFSETS = tuple(np.logspace(-2, math.log10(0.5), 8))
EXIT_OFFSETS = tuple(np.logspace(-3, -2, 5))


@functools.lru_cache(maxsize=None)
def critical_scan(num):
    t0 = time.time()
    scan = crit.estimate_Tc(REF_PARAMS, REF, SCAN_LEVELS, SCAN_TOL, num)
    Tc = scan.Tc
    crit.add_temperatures(scan, [Tc * (1 - d) for d in MAG_OFFSETS]
                          + [Tc * (1 + d) for d in EXIT_OFFSETS], num)
    mag = crit.magnetization_exponent(scan)
    window = (Tc * EXIT_OFFSETS[0] * (1 - 1e-9), Tc * EXIT_OFFSETS[-1] * (1 + 1e-9))
    exits = crit.exit_scaling(scan, REF, window)
    return {"scan": scan, "mag": mag, "exit": exits, "seconds": time.time() - t0}


def test_criterion_6_critical_scan():
    res = critical_scan(CHEAP)
    scan = res["scan"]
    c0A0 = REF.l(0) * crit.a_seq(REF, 0)
    Tn = scan.T_n
    inc = scan.c_increments[-4:]       # the last 5 levels give 4 increments
    band = max(inc) / min(inc) if min(inc) > 0 else math.inf
    checks = {
        "T_n_strictly_decreasing": all(b < a for a, b in zip(Tn, Tn[1:])),
        "Tc_in_range": 0 < scan.Tc < c0A0 / 4,
        "increment_band": band <= INCREMENT_BAND,
        "magnetization_slope": SLOPE_BAND[0] <= res["mag"].slope <= SLOPE_BAND[1],
        "exit_scaling_band": res["exit"].band < EXIT_BAND,
        "runtime": res["seconds"] < C6_SECONDS,
    }
    for name, val in checks.items():
        print(f"  {name}: {'ok' if val else 'FAILED'}")
    failed = [k for k, v in checks.items() if not v]
    assert report(6, not failed, Tc=_fmt(scan.Tc), c0A0_over_4=_fmt(c0A0 / 4),
                  increment_band=_fmt(band), slope=_fmt(res["mag"].slope),
                  exit_band=_fmt(res["exit"].band), seconds=_fmt(res["seconds"]),
                  failed=failed or "none")


# ----------------------------------------------------------------------
# 7. near-critical geometry


@functools.lru_cache(maxsize=None)
def geometry(num, T):
    return crit.near_critical_geometry(REF_PARAMS, REF, T, SCAN_LEVELS, 5, num)


def test_criterion_7_near_critical_geometry():
    scan = critical_scan(CHEAP)["scan"]
    T_mid = sum(scan.Tc_bracket) / 2
    geo = geometry(CHEAP, T_mid)
    ok = (abs(geo.mean_abs[-1] - 1) <= MEAN_ABS_TOL and geo.var_decreasing
          and geo.ratio_toward_one)
    assert report(7, ok, T=_fmt(T_mid), mean_abs=_fmt(geo.mean_abs[-1]),
                  var_abs=[_fmt(v) for v in geo.var_abs],
                  Mbar_over_L=[_fmt(v) for v in geo.ratio])


# ----------------------------------------------------------------------
# 8. finite-difference derivative bounds


@functools.lru_cache(maxsize=None)
def derivative_report(num, T):
    return crit.dM_dT_check(REF_PARAMS, REF, T, N_REF + 20, num=num)


def test_criterion_8_derivatives():
    t0 = time.time()
    reps = [derivative_report(CHEAP, T) for T in C8_TEMPS]
    seconds = time.time() - t0
    ok = seconds < C8_SECONDS
    worst = 0.0
    for rep in reps:
        ok &= rep.sign_ok and rep.part_b_ok
        over = [abs(d) / (PART_B_FACTOR * b)
                for d, b in zip(rep.part_b_dev, rep.part_b_band)]
        bad = [n for n, o in zip(rep.part_b_levels, over) if o > 1]
        worst = max(worst, max(over))
        print(f"  T={rep.T}: sign_ok={rep.sign_ok}, part_a range "
              f"[{min(rep.part_a):.4g}, {max(rep.part_a):.4g}], "
              f"part_b levels outside band: {bad}")
    assert report(8, ok, worst_part_b_over_band=_fmt(worst), seconds=_fmt(seconds))


# ----------------------------------------------------------------------
# 9. resolution doubling


def test_criterion_9_resolution_doubling():
    D = rg.DEFAULT_NUMERICS
    D2 = D.doubled()
    C2 = CHEAP.doubled()
    diffs = {}

    a, b = gaussian_closure(D), gaussian_closure(D2)
    # the distance itself is round-off sized; compare it on the 1e-5 scale it is judged on
    diffs["c1_gauss_dist"] = abs(max(a["dist"]) - max(b["dist"])) / GAUSS_DIST_MAX
    diffs["c1_var_ratio"] = max(_rel(x, y) for x, y in zip(a["ratio"], b["ratio"]))

    mc_diffs = {}
    for case in C2_CASES:
        diffs[f"c2_mbar_flow_{case}"] = _rel(flow_density(*case, D)[0], flow_density(*case, D2)[0])
        lo, hi = compare_case(*case, D), compare_case(*case, D2)
        mc_diffs[f"c2_chi2_{case}"] = _rel(lo["chi2"], hi["chi2"])

    a, b = fixed_point_result(2 ** 14, 256.0), fixed_point_result(2 ** 15, 512.0)
    for key in ("k2", "k3", "left_rate", "pi_mass"):
        diffs[f"c3_{key}"] = _rel(a[key], b[key])
    diffs["c3_pi_mean"] = abs(a["pi_mean"] - b["pi_mean"])

    for T in C4_TEMPS:
        a, b = constant_run(T, CHEAP)["log_chi"], constant_run(T, C2)["log_chi"]
        diffs[f"c4_chi_T{T}"] = math.expm1(abs(a - b))
    diffs["c4_M2_inf"] = _rel(low_run(D)["M2_inf"], low_run(D2)["M2_inf"])
    diffs["c4_tail_ratio"] = float(np.max(np.abs(low_run(D)["ratio"] / low_run(D2)["ratio"] - 1)))

    (_, s1, r1), (_, s2, r2) = decrement_stats(D), decrement_stats(D2)
    diffs["c5_c_dM2"] = float(np.max(np.abs(s1 / s2 - 1)))
    diffs["c5_ratio"] = float(np.max(np.abs(r1 / r2 - 1)))

    base = critical_scan(CHEAP)
    scan = base["scan"]
    # T at the last scanned level, re-bisected in a +-1e-4 relative bracket
    T_last = scan.T_n[-1]
    try:
        T_hi = crit.bisect_Tn(REF_PARAMS, REF, SCAN_LEVELS,
                              (T_last * (1 - DOUBLING_RTOL), T_last * (1 + DOUBLING_RTOL)),
                              1e-3 * DOUBLING_RTOL * T_last, C2,
                              crit.ExitLevels(REF_PARAMS, REF, SCAN_LEVELS, C2))
        diffs["c6_T_last"] = _rel(T_hi, T_last)
    except crit.BracketInvalid:
        diffs["c6_T_last"] = math.inf
    lv = crit.ExitLevels(REF_PARAMS, REF, SCAN_LEVELS, C2)
    for d in (MAG_OFFSETS[0], MAG_OFFSETS[-1]):
        T = scan.Tc * (1 - d)
        rec = next(r for r in scan.records if r["T"] == T)
        again = crit._record_dict(lv.record(T), REF, N_REF)
        diffs[f"c6_M_inf_{d:.3g}"] = _rel(again["M_inf"], rec["M_inf"])

    T_mid = sum(scan.Tc_bracket) / 2
    g1, g2 = geometry(CHEAP, T_mid), geometry(C2, T_mid)
    diffs["c7_mean_abs"] = _rel(g1.mean_abs[-1], g2.mean_abs[-1])
    diffs["c7_var_abs"] = _rel(g1.var_abs[-1], g2.var_abs[-1])
    diffs["c7_Mbar_over_L"] = _rel(g1.ratio[-1], g2.ratio[-1])

    d1, d2 = derivative_report(CHEAP, C8_TEMPS[1]), derivative_report(C2, C8_TEMPS[1])
    diffs["c8_dM"] = max(_rel(x, y) for x, y in zip(d1.dM_half, d2.dM_half))
    diffs["c8_part_a"] = max(_rel(x, y) for x, y in zip(d1.part_a, d2.part_a))

    bad = {k: v for k, v in diffs.items() if not v < DOUBLING_RTOL}
    bad_mc = {k: v for k, v in mc_diffs.items() if not v < DOUBLING_RTOL_MC}
    for k, v in {**diffs, **mc_diffs}.items():
        print(f"  {k}: {v:.3e}")
    assert report(9, not bad and not bad_mc,
                  worst=_fmt(max(diffs.values())), worst_mc=_fmt(max(mc_diffs.values())),
                  failed=sorted(bad) + sorted(bad_mc) or "none")
