import math

import numpy as np
import pytest

from hierdyson import fixed_point as fp


@pytest.fixture(scope="module")
def sol():
    return fp.solve_g(2)


def test_converges(sol):
    assert sol.residual < 1e-10
    assert sol.g.min() > -1e-12


def test_cumulants_match_series(sol):
    # kappa_k of the fixed point: sum_j 2^{j(1-k)} times the cumulant of the
    # single factor, a shifted -Gamma(1/2, 1/2) variable
    def kappa(k):
        single = (-1) ** k * math.gamma(k) * 0.5 * 0.5 ** k
        return single / (1 - 2.0 ** (1 - k))
    assert sol.cumulants["k2"] == pytest.approx(kappa(2), abs=1e-9)
    assert sol.cumulants["k3"] == pytest.approx(kappa(3), abs=1e-8)
    assert sol.cumulants["k4"] == pytest.approx(kappa(4), abs=1e-6)
    assert sol.cumulants["k1"] == pytest.approx(-0.25, abs=1e-12)


def test_transform_matches_product(sol):
    xi = sol.grid.xi[:200]
    exact = np.exp(fp.log_G_exact(xi, 2))
    np.testing.assert_allclose(sol.G[:200], exact, atol=1e-10)


def test_map_fixes_solution(sol):
    again = fp.apply_map(sol.g, sol.grid, 2, -0.25)
    assert np.max(np.abs(again - sol.g)) < 1e-11


def test_shift_moves_mean(sol):
    moved = fp.shift(sol.g, sol.grid, 1.5)
    dt = sol.grid.dt
    assert np.sum(sol.t * moved) * dt == pytest.approx(sol.mean_shift + 1.5, abs=1e-9)


def test_tail_value_agrees_with_grid(sol):
    for t in (-3.0, -1.0, 0.0, 1.0):
        k = int(np.argmin(np.abs(sol.t - t)))
        assert fp.tail_value(sol, float(sol.t[k])) == pytest.approx(sol.g[k], rel=1e-8)


def test_build_pi_constraints(sol):
    pi = fp.build_pi(sol)
    assert pi.mass == pytest.approx(1.0, abs=1e-8)
    assert abs(pi.mean) < 1e-8
    assert pi.C > 0


def test_tilt_center_guards():
    with pytest.raises(ValueError):
        fp.tilt_center(np.linspace(0, 2, 101), np.ones(101))
    with pytest.raises(fp.TiltOverflow):
        fp.tilt_center(np.linspace(-1, 1, 101), np.ones(101))


def test_solver_guards():
    with pytest.raises(ValueError):
        fp.solve_g(2, tol=1e-14)
    with pytest.raises(ValueError):
        fp.solve_g(2, fp.FrequencyGrid(n=1024, xi_max=256.0))


def test_r3_mean_and_variance():
    s = fp.solve_g(3)
    assert s.cumulants["k1"] == pytest.approx(-0.5, abs=1e-10)
    assert s.cumulants["k2"] == pytest.approx(0.5, abs=1e-8)
