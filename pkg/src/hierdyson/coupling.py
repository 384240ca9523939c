"""Coupling sequences l_n and the derived quantities c_n, A_n, c^(n)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DivergentSeries(ArithmeticError):
    pass


class Undecided(ArithmeticError):
    pass


class NoSuchLevel(ValueError):
    pass


FORMS = ("constant", "polylog", "explicit")
TAILS = ("constant", "ratio", "none")


@dataclass(frozen=True)
class CouplingSequence:
    """l_n for one of three families.

    ``constant``: l_n = 1.  ``polylog``: l_n = (1 + a n)^lam.
    ``explicit``: the listed values, continued by ``tail`` ("constant" repeats
    the last value, "ratio" keeps multiplying by the last ratio, "none" leaves
    the sequence undefined past the list).
    """

    form: str = "constant"
    a: float = 0.0
    lam: float = 0.0
    values: tuple = ()
    tail: str = "constant"
    tol: float = 1e-12
    j_budget: int = 4000
    _memo: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError(f"unknown coupling form {self.form!r}")
        if self.form == "polylog":
            if not (self.a > 0 and self.lam > 0):
                raise ValueError("polylog needs a > 0 and lambda > 0")
        if self.form == "explicit":
            vals = tuple(float(v) for v in self.values)
            if not vals or min(vals) <= 0:
                raise ValueError("explicit coupling needs positive values")
            if self.tail not in TAILS:
                raise ValueError(f"unknown tail rule {self.tail!r}")
            if self.tail == "ratio" and len(vals) < 2:
                raise ValueError("ratio tail needs at least two values")
            object.__setattr__(self, "values", vals)

    # -- serialization -------------------------------------------------
    @classmethod
    def from_dict(cls, spec: dict) -> "CouplingSequence":
        spec = dict(spec)
        form = spec.pop("form", None)
        allowed = {
            "constant": set(),
            "polylog": {"a", "lambda"},
            "explicit": {"values", "tail"},
        }
        if form not in allowed:
            raise ValueError(f"unknown coupling form {form!r}")
        extra = set(spec) - allowed[form] - {"tol"}
        if extra:
            raise ValueError(f"unknown coupling keys {sorted(extra)}")
        kw = {"form": form}
        if "tol" in spec:
            kw["tol"] = float(spec["tol"])
        if form == "polylog":
            kw["a"] = float(spec["a"])
            kw["lam"] = float(spec["lambda"])
        elif form == "explicit":
            kw["values"] = tuple(spec["values"])
            kw["tail"] = spec.get("tail", "constant")
        return cls(**kw)

    def to_dict(self) -> dict:
        if self.form == "constant":
            return {"form": "constant"}
        if self.form == "polylog":
            return {"form": "polylog", "a": self.a, "lambda": self.lam}
        return {"form": "explicit", "values": list(self.values), "tail": self.tail}

    # -- the sequence itself -------------------------------------------
    def l(self, n: int) -> float:
        if n < 0:
            if n == -1:
                return 1.0
            raise ValueError("level index must be >= -1")
        key = ("l", n)
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        if self.form == "constant":
            val = 1.0
        elif self.form == "polylog":
            val = (1.0 + self.a * n) ** self.lam
        else:
            vals = self.values
            if n < len(vals):
                val = vals[n]
            elif self.tail == "constant":
                val = vals[-1]
            elif self.tail == "ratio":
                val = vals[-1] * (vals[-1] / vals[-2]) ** (n - len(vals) + 1)
            else:
                raise IndexError(f"explicit coupling undefined at n={n}")
        self._memo[key] = val
        return val

    def l_array(self, n_stop: int) -> np.ndarray:
        """l_0 .. l_{n_stop-1} as an array."""
        if self.form == "polylog":
            return (1.0 + self.a * np.arange(n_stop)) ** self.lam
        return np.array([self.l(n) for n in range(n_stop)])

    def c_small(self, n: int) -> float:
        return self.l(n) / self.l(n - 1)


def l(seq: CouplingSequence, n: int) -> float:
    return seq.l(n)


def c_small(seq: CouplingSequence, n: int) -> float:
    """c_n = l_n / l_{n-1} with l_{-1} = 1."""
    return seq.c_small(n)


def a_seq(seq: CouplingSequence, n: int, tol: float | None = None) -> float:
    """A_n = 1 + l_n^{-1} sum_{j>=1} 2^{-j} l_{n+j}."""
    tol = seq.tol if tol is None else tol
    key = ("A", n, tol)
    hit = seq._memo.get(key)
    if hit is not None:
        return hit
    if seq.form == "constant":
        seq._memo[key] = 2.0
        return 2.0
    ln = seq.l(n)
    total = 1.0
    for j in range(1, seq.j_budget + 1):
        term = math.ldexp(seq.l(n + j) / ln, -j)
        total += term
        if term < tol * total:
            break
    else:
        raise DivergentSeries(f"A_{n} terms did not decay within {seq.j_budget} terms")
    seq._memo[key] = total
    return total


def c_big(seq: CouplingSequence, n: int, tol: float | None = None) -> float:
    """c^(n) = (1 + A_n) l_n, the Gaussian kernel constant of the step n -> n+1.

    This is what the two-block recursion for p_n produces once
    l_n A_n = l_n + l_{n+1} A_{n+1} / 2 is used to cancel the x^2 terms.
    """
    return (1.0 + a_seq(seq, n, tol)) * seq.l(n)


@dataclass(frozen=True)
class DysonResult:
    converged: bool
    value: float | None
    n_terms: int
    error_bound: float

    def __str__(self):
        if self.converged:
            return f"Converged(B={self.value:.12g})"
        return "Diverged"


def dyson_sum(
    seq: CouplingSequence,
    abs_tol: float = 1e-8,
    n_budget: int = 10_000_000,
    ceiling: float = 1e6,
) -> DysonResult:
    """B = sum_{n>=1} 1/l_n, certified by a tail bound."""
    if seq.form == "constant":
        return DysonResult(False, None, 0, math.inf)
    if seq.form == "polylog":
        a, lam = seq.a, seq.lam
        if lam <= 1:
            return DysonResult(False, None, 0, math.inf)
        # Euler-Maclaurin tail: sum_{k>n} f(k) = int_n^inf f - f(n)/2 + R,
        # |R| <= |f'(n)|/12 for f convex and decreasing.
        n_cut = 64
        while True:
            deriv = a * lam * (1 + a * n_cut) ** (-lam - 1)
            if deriv / 12 < abs_tol / 2 or n_cut >= n_budget:
                break
            n_cut *= 2
        n_cut = min(n_cut, n_budget)
        k = np.arange(1, n_cut + 1, dtype=float)
        head = math.fsum((1 + a * k) ** (-lam))
        integral = (1 + a * n_cut) ** (1 - lam) / (a * (lam - 1))
        f_n = (1 + a * n_cut) ** (-lam)
        err = a * lam * (1 + a * n_cut) ** (-lam - 1) / 12
        if err > abs_tol:
            raise Undecided("budget too small to certify the polylog sum")
        total = head + integral - f_n / 2
        if total > ceiling:
            return DysonResult(False, None, n_cut, math.inf)
        return DysonResult(True, total, n_cut, err)
    # explicit
    vals = seq.values
    head = math.fsum(1.0 / v for v in vals[1:])
    if head > ceiling:
        return DysonResult(False, None, len(vals) - 1, math.inf)
    if seq.tail == "constant":
        return DysonResult(False, None, len(vals) - 1, math.inf)
    if seq.tail == "ratio":
        q = vals[-1] / vals[-2]
        if q <= 1:
            return DysonResult(False, None, len(vals) - 1, math.inf)
        tail = (1.0 / vals[-1]) / (q - 1)
        return DysonResult(True, head + tail, len(vals) - 1, 0.0)
    raise Undecided("explicit coupling without tail rule cannot be certified")


def n_of_eta(seq: CouplingSequence, eta: float) -> int:
    """N(eta) = min{n : l_n > 1/eta}."""
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    target = 1.0 / eta
    if seq.form == "constant":
        raise NoSuchLevel("constant coupling never exceeds 1/eta")
    if seq.form == "polylog":
        guess = max(0, int(math.floor((target ** (1 / seq.lam) - 1) / seq.a)) - 2)
        n = guess
        while seq.l(n) <= target:
            n += 1
        while n > 0 and seq.l(n - 1) > target:
            n -= 1
        return n
    for n, v in enumerate(seq.values):
        if v > target:
            return n
    if seq.tail == "ratio" and seq.values[-1] > seq.values[-2]:
        n = len(seq.values)
        while seq.l(n) <= target:
            n += 1
        return n
    raise NoSuchLevel(f"explicit coupling stays <= {target}")


# -- Conditions 1-5 -------------------------------------------------------


@dataclass
class ConditionVerdict:
    passed: bool
    witness: dict


@dataclass
class ConditionReport:
    params: dict
    conditions: dict

    @property
    def all_passed(self) -> bool:
        return all(v.passed for v in self.conditions.values())

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "conditions": {
                k: {"passed": v.passed, "witness": v.witness}
                for k, v in self.conditions.items()
            },
        }


EPS_GRID = (1.0, 0.5, 0.1)


def check_conditions(
    seq: CouplingSequence,
    eta_bar: float,
    kappa: float,
    L: int,
    horizon: int,
    c_tail_tol: float = 1e-3,
) -> ConditionReport:
    if horizon < L:
        raise ValueError("horizon must be >= L")
    kmax = horizon
    lv = seq.l_array(horizon + kmax + L + 2)
    inv = 1.0 / lv
    ratios = lv[: horizon + 1] / np.concatenate(([1.0], lv[:horizon]))
    conds = {}

    # Condition 1
    tail = ratios[horizon // 2:]
    c1 = (
        abs(lv[0] - 1.0) < 1e-15
        and ratios.min() >= 1.0 - 1e-15
        and ratios.max() <= 1.01
        and np.all(np.abs(tail - 1.0) <= c_tail_tol)
    )
    conds["condition_1"] = ConditionVerdict(bool(c1), {
        "l_0": float(lv[0]),
        "max_c_n": float(ratios.max()),
        "argmax_c_n": int(ratios.argmax()),
        "min_c_n": float(ratios.min()),
        "max_tail_deviation": float(np.abs(tail - 1.0).max()),
    })

    # Condition 2: smallest K(eps) such that l_n sum_{j=n}^{n+K} 1/l_j >= 1/eps
    # for every n in (L, horizon].
    cums = np.concatenate(([0.0], np.cumsum(inv)))
    ns = np.arange(L + 1, horizon + 1)
    table = {}
    ok2 = True
    for eps in EPS_GRID:
        found = None
        for K in range(0, kmax + 1):
            s = lv[ns] * (cums[ns + K + 1] - cums[ns])
            if s.min() >= 1.0 / eps:
                found = K
                break
        table[str(eps)] = found
        ok2 = ok2 and found is not None
    conds["condition_2"] = ConditionVerdict(ok2, {"K_of_eps": table, "L": L})

    # Condition 3: S(n) = sum_{k=1}^n (l_k sum_{j=k}^n 1/l_j)^{-2}
    h = horizon
    S = np.empty(h)
    for n in range(1, h + 1):
        k = np.arange(1, n + 1)
        inner = lv[k] * (cums[n + 1] - cums[k])
        S[n - 1] = np.sum(inner ** -2.0)
    sup = float(S.max())
    growth = float(S[-1] - S[h // 2 - 1]) if h >= 2 else 0.0
    c3 = np.isfinite(sup) and growth <= 0.05 * S[-1]
    conds["condition_3"] = ConditionVerdict(bool(c3), {
        "sup_partial": sup, "growth_second_half": growth})

    # Condition 4
    dres = dyson_sum(seq)
    need = 400.0 / kappa
    if dres.converged:
        c4 = dres.value > need
        wit = {"sum": dres.value, "required": need}
    else:
        c4 = True
        wit = {"sum": "diverged", "required": need}
    conds["condition_4"] = ConditionVerdict(bool(c4), wit)

    # Condition 5
    worst = math.inf
    for k in range(1, L + 1):
        worst = min(worst, float(np.min(lv[: horizon + 1] / lv[k: horizon + 1 + k])))
    conds["condition_5"] = ConditionVerdict(bool(worst > eta_bar), {
        "min_ratio": worst, "eta_bar": eta_bar})

    return ConditionReport(
        params={"eta_bar": eta_bar, "kappa": kappa, "L": L, "horizon": horizon,
                "eps_grid": list(EPS_GRID), "coupling": seq.to_dict()},
        conditions=conds,
    )
