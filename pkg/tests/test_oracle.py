import math

import numpy as np
import pytest
from scipy.integrate import quad

from hierdyson import oracle as oc
from hierdyson import rg_flow as rg
from hierdyson.coupling import CouplingSequence
from hierdyson.radial import mass_full


def test_hier_distance():
    assert oc.hier_distance(1, 1) == 0
    assert oc.hier_distance(1, 2) == 1
    assert oc.hier_distance(2, 3) == 2
    assert oc.hier_distance(1, 8) == 4
    assert oc.hier_distance(4, 5) == 4
    with pytest.raises(ValueError):
        oc.hier_distance(0, 1)


def test_ultrametric():
    for i in range(1, 9):
        for j in range(1, 9):
            for k in range(1, 9):
                d = oc.hier_distance
                assert d(i, k) <= max(d(i, j), d(j, k))


def test_couplings_matrix(ref_coupling):
    J = oc.HierVolume(2, 2, ref_coupling, 1.0).couplings()
    assert np.allclose(J, J.T)
    assert J[0, 1] == pytest.approx(ref_coupling.l(0))
    assert J[0, 2] == pytest.approx(ref_coupling.l(1) / 4)


def test_hamiltonian_aligned_pair():
    vol = oc.HierVolume(1, 2, CouplingSequence(), 1.0)
    assert oc.hamiltonian(vol, [[1.0, 0.0], [1.0, 0.0]]) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        oc.hamiltonian(vol, [[1.0, 0.0]])


def test_single_site_moment_gaussian_limit():
    # kappa -> small: the free law approaches a standard Gaussian in R^2
    par = rg.ModelParams(kappa=1e-9)
    assert oc.single_site_moment(par, 2) == pytest.approx(2.0, rel=1e-6)


def test_single_site_moment_quadrature():
    par = rg.ModelParams(kappa=0.3, eps_poly=(0.005,))
    w = lambda x, k: x ** (1 + k) * (1 + 0.005) * math.exp(-x * x / 2 - 0.3 * x ** 4 / 4)
    exact = quad(w, 0, 20, args=(4,))[0] / quad(w, 0, 20, args=(0,))[0]
    assert oc.single_site_moment(par, 4) == pytest.approx(exact, rel=1e-10)


def test_direct_p1_is_normalized(ref_coupling):
    par = rg.ModelParams(kappa=0.05, T=2.0)
    p = oc.direct_p1(par, ref_coupling, n_u=101, rho_nodes=101)
    assert mass_full(p) == pytest.approx(1.0, rel=1e-6)


def test_decoupled_mc_matches_single_site():
    par = rg.ModelParams(kappa=0.3, T=1.0)
    vol = oc.HierVolume(1, 2, CouplingSequence(), 1.0, scale=0.0)
    mc = oc.mc_sample(vol, par, 200_000, seed=3)
    # two independent spins: E|mean|^2 = E|sigma|^2 / 2
    exact = oc.single_site_moment(par, 2) / 2
    est = mc.estimates["m2"]
    assert abs(est.value - exact) < 4 * est.stderr
    assert 0.3 <= mc.acceptance <= 0.6


def test_mc_is_reproducible(ref_coupling):
    par = rg.ModelParams(kappa=0.05, T=2.0)
    vol = oc.HierVolume(1, 2, ref_coupling, 2.0)
    a = oc.mc_sample(vol, par, 20_000, seed=11)
    b = oc.mc_sample(vol, par, 20_000, seed=11)
    assert a.to_json() == b.to_json()
    assert np.array_equal(a.hist, b.hist)


def test_mc_guards(ref_coupling):
    par = rg.ModelParams(kappa=0.05)
    with pytest.raises(ValueError):
        oc.mc_sample(oc.HierVolume(5, 2, ref_coupling, 1.0), par, 1000, 0)
    with pytest.raises(ValueError):
        oc.mc_sample(oc.HierVolume(1, 2, ref_coupling, 1.0), par, 1000, 0, batches=5)


def test_bin_probabilities_sum_to_one():
    g = rg.gaussian_profile(2, 1.0)
    edges = np.linspace(0, g.grid.x_max, 31)
    probs = oc.radial_bin_probs(g, edges)
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    # Rayleigh law: P(|x| < 1) = 1 - e^{-1/2}
    cdf = oc.radial_bin_probs(g, np.array([0.0, 1.0]))[0]
    assert cdf == pytest.approx(1 - math.exp(-0.5), rel=1e-8)
