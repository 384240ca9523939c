"""Command-line front end: config validation, dispatch, and output files.

Usage::

    hierdyson <subcommand> --config run.json --out results/ [--threads N] [--seed U64]

Exit status is 0 on success, 2 when the config is rejected, and 3 when a
numerical routine gives up.  Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import jsonschema
import numpy as np

from . import coupling as cpl
from . import critical, fixed_point, high_temp, low_temp, oracle, radial, rg_flow
from .rg_flow import ModelParams, Numerics

EXPERIMENTS = ("check-conditions", "flow", "fixed-point", "critical", "oracle", "compare")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
U64 = 2 ** 64 - 1

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int_pos = {"type": "integer", "minimum": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "r": {"type": "integer", "minimum": 2, "maximum": 16},
                "kappa": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "T": _pos,
                "eps_poly": {"type": "array", "items": _num, "maxItems": 8},
                "eta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "eta_bar": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "theta_high": _pos,
            },
        },
        "coupling": {
            "type": "object",
            "additionalProperties": False,
            "required": ["form"],
            "properties": {
                "form": {"enum": ["constant", "polylog", "explicit"]},
                "a": _pos,
                "lambda": _pos,
                "values": {"type": "array", "items": _pos, "minItems": 1},
                "tail": {"enum": ["constant", "ratio", "none"]},
            },
        },
        "numerics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "quad_u": {"type": "integer", "minimum": 8, "maximum": 4096},
                "quad_rho": {"type": "integer", "minimum": 8, "maximum": 4096},
                "pts_per_scale": {"type": "number", "minimum": 4, "maximum": 1000},
                "kernel_width": {"type": "number", "minimum": 3, "maximum": 40},
                "tail_floor": {"type": "number", "exclusiveMinimum": 0, "maximum": 1e-6},
                "coarse_nodes": {"type": "integer", "minimum": 33, "maximum": 100000},
                "x_ceiling": _pos,
                "max_nodes": {"type": "integer", "minimum": 65},
            },
        },
        "temperatures": {"type": "array", "items": _pos, "minItems": 1},
        "bracket": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
        "n_max": {"type": "integer", "minimum": 0, "maximum": 1_000_000},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": U64},
                  "minItems": 1},
        "output_dir": {"type": "string"},
        "thresholds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"theta_high": _pos, "tol_T": _pos},
        },
        "flow": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"high_extra_levels": {"type": "integer", "minimum": 0},
                           "low_table": {"type": "boolean"},
                           "stop_on_exit": {"type": "boolean"}},
        },
        "critical": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"n_levels": _int_pos, "n_tail": {"type": "integer", "minimum": 2},
                           "extra_temperatures": {"type": "array", "items": _pos},
                           "T_window": {"type": "array", "items": _pos,
                                        "minItems": 2, "maxItems": 2}},
        },
        "oracle": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"n": {"type": "integer", "minimum": 1, "maximum": 4},
                           "sweeps": {"type": "integer", "minimum": 1000},
                           "batches": {"type": "integer", "minimum": 20}},
        },
        "fixed_point": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"r": {"type": "integer", "minimum": 2, "maximum": 16},
                           "n_freq": {"type": "integer", "minimum": 1024},
                           "xi_max": _pos,
                           "tol": {"type": "number", "minimum": 1e-12}},
        },
        "check_conditions": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"L": _int_pos, "horizon": _int_pos},
        },
    },
}


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------
# config


def load_config(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from exc
    if "bracket" in cfg and not cfg["bracket"][0] < cfg["bracket"][1]:
        raise ConfigError("bracket must be increasing")
    # constructing the domain objects runs their own invariant checks
    try:
        model_params(cfg)
        coupling_of(cfg)
        numerics_of(cfg)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def model_params(cfg: dict, T: float | None = None) -> ModelParams:
    m = dict(cfg.get("model", {}))
    if "eps_poly" in m:
        m["eps_poly"] = tuple(m["eps_poly"])
    th = cfg.get("thresholds", {})
    if "theta_high" in th:
        m.setdefault("theta_high", th["theta_high"])
    if T is not None:
        m["T"] = T
    return ModelParams(**m)


def coupling_of(cfg: dict) -> cpl.CouplingSequence:
    return cpl.CouplingSequence.from_dict(cfg.get("coupling", {"form": "constant"}))


def numerics_of(cfg: dict) -> Numerics:
    return Numerics(**cfg.get("numerics", {}))


def temperatures_of(cfg: dict) -> list:
    if "temperatures" in cfg:
        return [float(t) for t in cfg["temperatures"]]
    return [model_params(cfg).T]


# ----------------------------------------------------------------------
# output helpers


class Output:
    def __init__(self, root: Path):
        self.root = root
        self.files: list[str] = []

    def write(self, name: str, text: str) -> None:
        path = self.root / name
        path.write_text(text)
        self.files.append(name)

    def json(self, name: str, obj) -> None:
        self.write(name, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")

    def digests(self) -> dict:
        return {f: hashlib.sha256((self.root / f).read_bytes()).hexdigest() for f in self.files}


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def _versions() -> dict:
    import numba
    import scipy
    from importlib import metadata

    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__,
            "jsonschema": metadata.version("jsonschema"), "hierdyson": pkg}


def _tag(k: int) -> str:
    return f"T{k:02d}"


def _pmap(fn, items, threads: int):
    """Ordered map, in worker processes when threads > 1."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with cf.ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ----------------------------------------------------------------------
# experiments


def _check_conditions(cfg, out: Output, threads: int, seed: int | None) -> dict:
    opts = cfg.get("check_conditions", {})
    params = model_params(cfg)
    rep = cpl.check_conditions(coupling_of(cfg), params.eta_bar, params.kappa,
                               opts.get("L", 4), opts.get("horizon", 200))
    out.json("conditions.json", rep.to_dict())
    return {"all_passed": rep.all_passed}


def _flow_job(args):
    cfg, T = args
    params = model_params(cfg, T)
    cp = coupling_of(cfg)
    num = numerics_of(cfg)
    opts = cfg.get("flow", {})
    keep = "all" if opts.get("low_table") else 8
    tr = rg_flow.run(params, cp, cfg.get("n_max", 40), num, keep=keep,
                     stop_on_exit=opts.get("stop_on_exit", False))
    res = {"trajectory": tr.to_csv(), "termination": tr.termination,
           "final": radial.to_csv(rg_flow.to_p(tr.states[max(tr.states)])),
           "nbar": critical.nbar(tr), "final_row": tr.rows[-1]}
    if tr.termination == rg_flow.REACHED_HIGH:
        obs = high_temp.track_high_moments(tr, opts.get("high_extra_levels", 0), num)
        res["high"] = obs.to_csv()
    if opts.get("low_table"):
        res["low"] = low_temp.low_table_csv(low_temp.low_table(tr))
    return res


def _flow(cfg, out: Output, threads: int, seed: int | None) -> dict:
    temps = temperatures_of(cfg)
    results = _pmap(_flow_job, [(cfg, T) for T in temps], threads)
    summary = []
    for k, (T, res) in enumerate(zip(temps, results)):
        tag = _tag(k)
        out.write(f"trajectory_{tag}.csv", res["trajectory"])
        out.write(f"density_{tag}.csv", res["final"])
        if "high" in res:
            out.write(f"high_{tag}.csv", res["high"])
        if "low" in res:
            out.write(f"low_{tag}.csv", res["low"])
        summary.append({"tag": tag, "T": T, "termination": res["termination"],
                        "nbar": res["nbar"], "final": res["final_row"]})
    out.json("flow_summary.json", summary)
    return {"runs": len(summary)}


def _fixed_point(cfg, out: Output, threads: int, seed: int | None) -> dict:
    opts = cfg.get("fixed_point", {})
    grid = fixed_point.FrequencyGrid(n=opts.get("n_freq", 2 ** 14), xi_max=opts.get("xi_max", 256.0))
    sol = fixed_point.solve_g(opts.get("r", 2), grid, tol=opts.get("tol", 1e-12))
    fixed_point.tail_rates(sol)
    pi = fixed_point.build_pi(sol)
    keep = (sol.t >= -20) & (sol.t <= 20)
    out.write("g.csv", "t,g\n" + "".join(f"{t:.17g},{v:.17g}\n"
                                          for t, v in zip(sol.t[keep], sol.g[keep])))
    keep = (pi.t >= -20) & (pi.t <= 20)
    out.write("pi.csv", "t,pi\n" + "".join(f"{t:.17g},{v:.17g}\n"
                                            for t, v in zip(pi.t[keep], pi.values[keep])))
    out.write("metadata.json", fixed_point.metadata_json(sol, pi) + "\n")
    return {"kappa2": sol.cumulants.get("k2"), "left_rate": sol.left_rate,
            "residual": sol.residual}


def _critical(cfg, out: Output, threads: int, seed: int | None) -> dict:
    opts = cfg.get("critical", {})
    params = model_params(cfg)
    cp = coupling_of(cfg)
    num = numerics_of(cfg)
    tol = cfg.get("thresholds", {}).get("tol_T", 1e-6)
    n_levels = opts.get("n_levels", cfg.get("n_max", 40))
    bracket = tuple(cfg["bracket"]) if "bracket" in cfg else None
    scan = critical.estimate_Tc(params, cp, n_levels, tol, num, opts.get("n_tail", 8), bracket)
    extra = opts.get("extra_temperatures", [])
    if extra and scan.verdict == critical.RESOLVED:
        critical.add_temperatures(scan, extra, num)
        try:
            win = tuple(opts["T_window"]) if "T_window" in opts else None
            critical.magnetization_exponent(scan, win)
        except critical.InsufficientPoints as exc:
            scan.exponents["magnetization"] = {"error": str(exc)}
        try:
            critical.exit_scaling(scan, cp)
        except critical.InsufficientPoints as exc:
            scan.exponents["exit_scaling_band"] = {"error": str(exc)}
    out.write("scan.json", scan.to_json() + "\n")
    out.write("scan_records.csv", scan.records_csv())
    return {"verdict": scan.verdict, "Tc": scan.Tc}


def _oracle_job(args):
    cfg, T, s = args
    params = model_params(cfg, T)
    opts = cfg.get("oracle", {})
    vol = oracle.HierVolume(opts.get("n", 1), params.r, coupling_of(cfg), T)
    mc = oracle.mc_sample(vol, params, opts.get("sweeps", 200_000), s,
                          batches=opts.get("batches", 50))
    return mc.to_json(), mc.hist_csv(), mc


def _seeds(cfg, seed):
    return [seed] if seed is not None else [int(s) for s in cfg.get("seeds", [20240611])]


def _oracle(cfg, out: Output, threads: int, seed: int | None) -> dict:
    temps = temperatures_of(cfg)
    jobs = [(cfg, T, s) for T in temps for s in _seeds(cfg, seed)]
    results = _pmap(_oracle_job, jobs, threads)
    for (cfg_, T, s), (js, hist, _) in zip(jobs, results):
        k = temps.index(T)
        out.write(f"mc_{_tag(k)}_s{s}.json", js + "\n")
        out.write(f"mc_hist_{_tag(k)}_s{s}.csv", hist)
    return {"chains": len(jobs)}


def _compare_job(args):
    cfg, T, s = args
    params = model_params(cfg, T)
    cp = coupling_of(cfg)
    n = cfg.get("oracle", {}).get("n", 1)
    tr = rg_flow.run(params, cp, n, numerics_of(cfg))
    if n not in tr.states:
        raise rg_flow.QuadratureDivergence(f"flow stopped before level {n}")
    st = tr.states[n]
    _, _, mc = _oracle_job((cfg, T, s))
    probs = oracle.radial_bin_probs(rg_flow.to_p(st), mc.hist_edges)
    chi2, dof = oracle.histogram_chi2(mc, probs)
    est = mc.estimates["Mbar"]
    z = (est.value - st.Mbar) / est.stderr
    zbins = (mc.hist - probs) / np.where(mc.hist_stderr > 0, mc.hist_stderr, np.inf)
    return {"T": T, "seed": s, "n": n, "Mbar_flow": st.Mbar, "Mbar_mc": est.value,
            "Mbar_se": est.stderr, "z": z, "chi2": chi2, "dof": dof,
            "max_bin_z": float(np.max(np.abs(zbins))), "sweeps": mc.sweeps,
            "acceptance": mc.acceptance}


def _compare(cfg, out: Output, threads: int, seed: int | None) -> dict:
    temps = temperatures_of(cfg)
    jobs = [(cfg, T, s) for T in temps for s in _seeds(cfg, seed)]
    rows = _pmap(_compare_job, jobs, threads)
    out.json("compare.json", rows)
    cols = ["T", "seed", "n", "Mbar_flow", "Mbar_mc", "Mbar_se", "z", "chi2", "dof", "max_bin_z"]
    out.write("compare.csv", ",".join(cols) + "\n" + "".join(
        ",".join(f"{r[c]:.17g}" if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n"
        for r in rows))
    return {"max_abs_z": max(abs(r["z"]) for r in rows)}


DISPATCH = {
    "check-conditions": _check_conditions,
    "flow": _flow,
    "fixed-point": _fixed_point,
    "critical": _critical,
    "oracle": _oracle,
    "compare": _compare,
}

NUMERIC_ERRORS = (ArithmeticError, oracle.AutotuneFailed, critical.BracketInvalid,
                  critical.InsufficientPoints, high_temp.NotInHighRegion,
                  low_temp.MeanViolation)


# ----------------------------------------------------------------------
# entry point


def _threads(arg: int | None) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("HRG_THREADS")
    if env is None:
        return 1
    try:
        val = int(env)
    except ValueError as exc:
        raise ConfigError(f"HRG_THREADS must be an integer, got {env!r}") from exc
    if val < 1:
        raise ConfigError("HRG_THREADS must be >= 1")
    return val


def _fail(code: int, exc: BaseException) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def _u64(text: str) -> int:
    val = int(text, 0)
    if not 0 <= val <= U64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return val


def _positive(text: str) -> int:
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError("thread count must be >= 1")
    return val


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hierdyson", description=__doc__.splitlines()[0])
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--threads", type=_positive, help="worker processes (env HRG_THREADS)")
    p.add_argument("--seed", type=_u64, help="64-bit seed for Monte Carlo chains")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    t0 = time.time()
    try:
        cfg = load_config(args.config)
        if cfg.get("experiment", args.experiment) != args.experiment:
            raise ConfigError(f"config is for {cfg['experiment']!r}, not {args.experiment!r}")
        threads = _threads(args.threads)
        out_dir = args.out or cfg.get("output_dir")
        if not out_dir:
            raise ConfigError("no output directory: pass --out or set output_dir")
        root = Path(out_dir)
        if root.exists() and not root.is_dir():
            raise ConfigError(f"{root} exists and is not a directory")
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)

    root.mkdir(parents=True, exist_ok=True)
    out = Output(root)
    try:
        result = DISPATCH[args.experiment](cfg, out, threads, args.seed)
    except NUMERIC_ERRORS as exc:
        return _fail(EXIT_NUMERIC, exc)
    manifest = {
        "experiment": args.experiment,
        "config": cfg,
        "seed": args.seed,
        "threads": threads,
        "versions": _versions(),
        "wall_time_s": time.time() - t0,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(t0)),
        "result": result,
        "outputs": out.digests(),
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
