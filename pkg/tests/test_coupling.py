import math

import numpy as np
import pytest
from scipy.special import zeta

from hierdyson import coupling as cpl
from hierdyson.coupling import CouplingSequence


def brute_A(seq, n, terms=400):
    j = np.arange(1, terms)
    return 1.0 + sum(seq.l(n + int(k)) / seq.l(n) * 2.0 ** -int(k) for k in j)


def test_constant_sequence():
    seq = CouplingSequence()
    assert seq.l(0) == seq.l(1000) == 1.0
    assert cpl.a_seq(seq, 7) == 2.0
    assert cpl.c_big(seq, 3) == 3.0
    assert not cpl.dyson_sum(seq).converged


@pytest.mark.parametrize("n", [0, 1, 10, 365])
def test_A_matches_direct_sum(ref_coupling, n):
    assert cpl.a_seq(ref_coupling, n) == pytest.approx(brute_A(ref_coupling, n), rel=1e-11)


def test_A_two_level_identity(ref_coupling):
    # l_n A_n = l_n + l_{n+1} A_{n+1} / 2
    for n in (0, 5, 50):
        lhs = ref_coupling.l(n) * cpl.a_seq(ref_coupling, n)
        rhs = ref_coupling.l(n) + ref_coupling.l(n + 1) * cpl.a_seq(ref_coupling, n + 1) / 2
        assert lhs == pytest.approx(rhs, rel=1e-11)


def test_c_small_uses_l_minus_one():
    seq = CouplingSequence(form="explicit", values=(2.0, 3.0), tail="constant")
    assert cpl.c_small(seq, 0) == 2.0
    assert cpl.c_small(seq, 1) == 1.5
    assert seq.l(5) == 3.0


def test_ratio_tail():
    seq = CouplingSequence(form="explicit", values=(1.0, 2.0), tail="ratio")
    assert seq.l(4) == 16.0
    res = cpl.dyson_sum(seq)
    assert res.converged and res.value == pytest.approx(1.0)


def test_none_tail_is_undefined_past_the_list():
    seq = CouplingSequence(form="explicit", values=(1.0, 2.0), tail="none")
    with pytest.raises(IndexError):
        seq.l(2)
    with pytest.raises(cpl.Undecided):
        cpl.dyson_sum(seq)


@pytest.mark.parametrize("a,lam", [(0.01, 1.5), (0.4, 1.5), (1.0, 2.0)])
def test_polylog_dyson_sum_hurwitz(a, lam):
    # sum_{k>=1} (1 + a k)^-lam = a^-lam zeta(lam, 1 + 1/a)
    exact = a ** -lam * zeta(lam, 1 + 1 / a)
    res = cpl.dyson_sum(CouplingSequence(form="polylog", a=a, lam=lam))
    assert res.converged
    assert res.value == pytest.approx(exact, abs=1e-7)


def test_polylog_lambda_at_most_one_diverges():
    assert not cpl.dyson_sum(CouplingSequence(form="polylog", a=0.1, lam=1.0)).converged


def test_n_of_eta_brute(ref_coupling):
    n = cpl.n_of_eta(ref_coupling, 0.1)
    assert ref_coupling.l(n) > 10 >= ref_coupling.l(n - 1)
    assert n == 365
    with pytest.raises(cpl.NoSuchLevel):
        cpl.n_of_eta(CouplingSequence(), 0.1)
    with pytest.raises(ValueError):
        cpl.n_of_eta(ref_coupling, 1.5)


def test_invalid_sequences():
    with pytest.raises(ValueError):
        CouplingSequence(form="polylog", a=-1, lam=2)
    with pytest.raises(ValueError):
        CouplingSequence(form="explicit", values=(1.0, 0.0))
    with pytest.raises(ValueError):
        CouplingSequence.from_dict({"form": "constant", "a": 1})


def test_dict_round_trip(ref_coupling):
    again = CouplingSequence.from_dict(ref_coupling.to_dict())
    assert again.l(17) == ref_coupling.l(17)


def test_condition_1_fails_for_steep_polylog():
    rep = cpl.check_conditions(CouplingSequence(form="polylog", a=1.0, lam=2.0),
                               eta_bar=0.5, kappa=0.05, L=4, horizon=200)
    c1 = rep.conditions["condition_1"]
    assert not c1.passed
    assert c1.witness["max_c_n"] == pytest.approx(4.0)
    assert not rep.all_passed


def test_condition_4_threshold(ref_coupling):
    rep = cpl.check_conditions(ref_coupling, eta_bar=0.5, kappa=0.05, L=4, horizon=400)
    c4 = rep.conditions["condition_4"]
    assert c4.witness["required"] == pytest.approx(8000.0)
    assert c4.passed == (c4.witness["sum"] > 8000.0)
    # c_1 = 1.01^1.5 exceeds the 1.01 cap
    assert not rep.conditions["condition_1"].passed
    gentle = cpl.check_conditions(CouplingSequence(form="polylog", a=0.001, lam=1.5),
                                  eta_bar=0.5, kappa=0.05, L=4, horizon=2000)
    assert gentle.conditions["condition_1"].passed


def test_condition_report_serializes(ref_coupling):
    d = cpl.check_conditions(ref_coupling, 0.5, 0.05, 4, 100).to_dict()
    assert set(d["conditions"]) == {f"condition_{k}" for k in range(1, 6)}
    assert math.isfinite(d["conditions"]["condition_5"]["witness"]["min_ratio"])
