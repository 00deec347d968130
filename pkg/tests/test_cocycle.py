import numpy as np

import oracles as orc
from conftest import X0
from nuhyp.cocycle import lyapunov_estimate, orbit, restricted_norms
from nuhyp.systems import ConstantSplitting, identity_map


def test_orbit_fixed_point_and_empty():
    from nuhyp.systems import cat_map
    seg = orbit(cat_map(), [0, 0], 10)
    assert np.all(seg.points == 0) and seg.length == 10
    seg0 = orbit(cat_map(), X0, 0)
    assert seg0.length == 0 and np.array_equal(seg0.points[0], X0)


def test_orbit_deterministic(pert):
    f, _ = pert
    a = orbit(f, X0, 100_000)
    b = orbit(f, X0, 100_000)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.jacobians, b.jacobians)


def test_restricted_norms_cat(cat):
    f, s = cat
    seg = orbit(f, X0, 50)
    L, Lm = np.log(orc.LAMBDA_PLUS), np.log(orc.LAMBDA_MINUS)
    np.testing.assert_allclose(restricted_norms(seg, s, 0, 13, 1), (L, L), atol=1e-14)
    assert restricted_norms(seg, s, 1, 5, 0) == (0.0, 0.0)
    np.testing.assert_allclose(restricted_norms(seg, s, 1, 3, 7), (7 * Lm, 7 * Lm), atol=1e-13)


def test_window_additivity(pert, pert_short):
    seg, stats = pert_short
    a = stats.window(0, 100, 30)[0]
    b = stats.window(0, 130, 45)[0]
    assert abs(stats.window(0, 100, 75)[0] - (a + b)) < 1e-11


def test_identity_exponents_zero():
    f = identity_map()
    s = ConstantSplitting([np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])])
    est = lyapunov_estimate(f, s, X0, 1000)
    assert np.all(est.chi_minus == 0) and np.all(est.chi_plus == 0)


def test_cat_exponents(cat):
    f, s = cat
    est = lyapunov_estimate(f, s, X0, 100_000)
    assert abs(est.chi_plus[0] - orc.LOG_LAMBDA) < 1e-9
    assert abs(est.chi_minus[1] + orc.LOG_LAMBDA) < 1e-9


def test_perturbed_exponents_self_consistent(pert_long):
    f, s, _, stats = pert_long
    big = lyapunov_estimate(f, s, X0, 1_000_000, stats=stats)
    small = lyapunov_estimate(f, s, X0, 100_000)
    assert np.abs(big.chi_plus - small.chi_plus).max() <= 5e-3
    assert abs(big.chi_minus[0] - orc.PERTURBED_EXPONENTS[0]) < orc.PERTURBED_EXPONENT_TOL
    assert abs(big.chi_plus[-1] - orc.PERTURBED_EXPONENTS[1]) < orc.PERTURBED_EXPONENT_TOL


def test_trace_has_running_averages(pert):
    f, s = pert
    est = lyapunov_estimate(f, s, X0, 10_000, n_trace=50)
    assert len(est.trace_steps) == len(est.trace_plus) <= 50
    assert est.trace_steps[-1] == 10_000
