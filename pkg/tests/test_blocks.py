import numpy as np
import pytest

import oracles as orc
from conftest import X0
from nuhyp.blocks import (CoverageError, EmptyBlockError, block_bound_check, block_points, covering_radius,
                          epsilon_zero, growth_bound_violation, level_estimates, resonance_sequences,
                          resonance_times, select_power, tempered_audit)
from nuhyp.cocycle import orbit

EX = orc.PERTURBED_EXPONENTS
CAT_EX = (orc.LOG_LAMBDA, -orc.LOG_LAMBDA)


@pytest.fixture(scope="module")
def cat_prof(cat):
    f, s = cat
    seg = orbit(f, X0, 5000)
    return resonance_sequences(seg, s, CAT_EX, 0.05, window=100)


@pytest.fixture(scope="module")
def pert_prof(pert, pert_short):
    f, s = pert
    seg, stats = pert_short
    return resonance_sequences(seg, s, EX, 0.05, window=200, stats=stats)


def test_epsilon_zero_cat():
    assert epsilon_zero(CAT_EX) == pytest.approx(orc.LOG_LAMBDA / 10)


def test_cat_sequences_identically_one(cat_prof):
    assert np.all(cat_prof.log_a1 == 0) and np.all(cat_prof.log_a2 == 0)
    assert cat_prof.log_a1[0] == 0


def test_cat_h1_everything(cat_prof):
    H = resonance_times(cat_prof, 1.0)
    assert H.density == 1.0 and len(H.times) == cat_prof.n_computed


def test_large_t_includes_all(pert_prof):
    t = float(np.exp(pert_prof.level().max())) * 1.01
    assert resonance_times(pert_prof, t).density == 1.0


def test_levels_nested(pert_prof):
    a = set(resonance_times(pert_prof, 2).times)
    b = set(resonance_times(pert_prof, 5).times)
    assert a <= b


def test_level_below_one_rejected(pert_prof):
    with pytest.raises(ValueError):
        resonance_times(pert_prof, 0.5)


def test_window_zero_gives_trivial_a2(pert, pert_short):
    f, s = pert
    seg, stats = pert_short
    prof = resonance_sequences(seg, s, EX, 0.05, window=0, stats=stats)
    assert np.all(prof.log_a2 == 0)


def test_growth_bound(pert_prof):
    assert growth_bound_violation(pert_prof) <= 1e-12


def test_block_points_fixed_point(cat):
    f, s = cat
    prof = resonance_sequences(orbit(f, [0, 0], 300), s, CAT_EX, 0.05, window=50)
    B = block_points(prof, resonance_times(prof, 1.0))
    assert np.all(B.points == 0) and B.mesh == 0.0


def test_block_points_empty_tail(pert_prof):
    ts = resonance_times(pert_prof, 1.0)
    ts.times = ts.times[:0]
    with pytest.raises(EmptyBlockError):
        block_points(pert_prof, ts, 0)


def test_tail_inclusion(pert_prof):
    ts = resonance_times(pert_prof, 3.0)
    late = set(block_points(pert_prof, ts, 10_000).indices)
    early = set(block_points(pert_prof, ts, 1_000).indices)
    assert late <= early


def test_covering_radius_simple():
    assert covering_radius([[0.1, 0.1]]) == 0.0
    assert covering_radius([[0.0, 0.0], [0.0, 0.5]]) == pytest.approx(0.5)


def test_cat_level_function_is_one(cat_prof):
    lf = level_estimates(cat_prof, np.arange(0, 4000, 37))
    assert np.all(lf.values == 1)
    aud = tempered_audit(lf)
    assert np.all(aud.sequence == 0)


def test_level_at_block_point(pert_prof):
    idx = resonance_times(pert_prof, 2.0).times[:50]
    lf = level_estimates(pert_prof, idx, mesh=1e-12)
    assert np.all(lf.values <= 2)


def test_level_strict_coverage(pert_prof):
    inside = set(resonance_times(pert_prof, 1.0).times)
    out = [k for k in range(pert_prof.n_computed) if k not in inside][:3]
    with pytest.raises(CoverageError):
        level_estimates(pert_prof, out, levels=(1,), mesh=1e-15)
    assert np.isnan(level_estimates(pert_prof, out, levels=(1,), mesh=1e-15, strict=False).values).all()


def test_perturbed_tempered_monotone(pert, pert_short):
    f, s = pert
    seg, stats = pert_short
    prof = resonance_sequences(seg, s, EX, 0.05, window=200, stats=stats)
    aud = tempered_audit(level_estimates(prof, strict=False))
    assert abs(aud.tail_max_half) <= 2 * abs(aud.tail_max_quarter) + 1e-15


def test_bound_check_cat_closed_form(cat_prof):
    k = 17
    rep = block_bound_check(cat_prof, 1.0, [500, 900], k)
    np.testing.assert_allclose(rep.residuals, 0.05 * k, atol=1e-11)


def test_bound_check_k0(pert_prof):
    rep = block_bound_check(pert_prof, 3.0, [100, 200], 0)
    np.testing.assert_allclose(rep.residuals, np.log(3.0))


def test_bound_check_perturbed_direct(pert_prof, pert_short):
    seg, stats = pert_short
    H = resonance_times(pert_prof, 3.0).times
    H = H[(H >= 200) & (H + 200 <= pert_prof.n_computed)]
    rng = np.random.default_rng(9)
    fE, fF = stats.frames[0][..., 0], stats.frames[-1][..., 0]
    for j, k in zip(rng.choice(H, 100), rng.integers(0, 201, 100)):
        assert block_bound_check(pert_prof, 3.0, [j], int(k)).passed()
        assert min(orc.product_residuals(seg.jacobians, fE, fF, EX, 0.05, 3.0, int(j), int(k))) >= -1e-10


def test_bound_check_needs_orbit(pert_prof):
    with pytest.raises(ValueError):
        block_bound_check(pert_prof, 2.0, [5], 10)


def test_select_power_cat(cat):
    f, s = cat
    sel = select_power(f, s, X0, 0.05, 0.9, n=5000, exponents=CAT_EX)
    assert sel.N == 1 and sel.density == 1.0


def test_select_power_theta_zero(pert):
    f, s = pert
    sel = select_power(f, s, X0, 0.05, 0.0, candidates=(4, 2, 8), n=20_000, exponents=EX)
    assert sel.N == 2


def test_select_power_monotone_flag(pert):
    f, s = pert
    sel = select_power(f, s, X0, 0.05, 0.5, n=50_000, exponents=EX)
    vals = [sel.densities[N] for N in sorted(sel.densities)]
    assert sel.monotone == all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
    assert sel.densities[sel.N] > 0.5
