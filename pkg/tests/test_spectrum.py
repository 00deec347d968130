from types import SimpleNamespace

import numpy as np
import pytest

import oracles as orc
from conftest import X0
from nuhyp.blocks import resonance_times
from nuhyp.cocycle import orbit
from nuhyp.shadowing import periodic_newton
from nuhyp.spectrum import (find_recurrences, horseshoe_spectrum_audit, liaopesin_check, match_spectra,
                            multi_resonance, periodic_exponents, two_bundle_profile)
from nuhyp.systems import default_splitting

L = orc.LOG_LAMBDA
CAT_EX = (L, -L)
EX = orc.PERTURBED_EXPONENTS


@pytest.fixture(scope="module")
def cat_full(cat):
    f, _ = cat
    return f, default_splitting(f, full=True)


@pytest.fixture(scope="module")
def pert_profiles(pert_short):
    seg, stats = pert_short
    return multi_resonance(seg, None, EX, 0.05, stats=stats), two_bundle_profile(stats, EX, 0.05)


def test_cat_multi_trivial(cat_full):
    f, s = cat_full
    prof = multi_resonance(orbit(f, X0, 3000), s, CAT_EX, 0.05, window=100)
    assert np.all(prof.log_a1 == 0) and np.all(prof.log_a2 == 0)


def test_window_zero(pert_short):
    seg, stats = pert_short
    prof = multi_resonance(seg, None, EX, 0.05, window=0, stats=stats)
    assert np.all(prof.log_a2 == 0)


def test_multi_needs_one_exponent_per_bundle(pert_short):
    seg, stats = pert_short
    with pytest.raises(ValueError):
        multi_resonance(seg, None, (0.9,), 0.05, stats=stats)


def test_multi_block_inside_two_bundle_block(pert_profiles):
    multi, two = pert_profiles
    for t in (1.5, 3.0, 10.0):
        assert set(resonance_times(multi, t).times) <= set(resonance_times(two, t).times)


def test_liaopesin_k0_is_log_t(pert_profiles):
    multi, _ = pert_profiles
    rep = liaopesin_check(multi, 2.0, [100, 500], 0)
    for r in rep.residuals.values():
        np.testing.assert_allclose(r, np.log(2.0))


def test_liaopesin_cat_closed_form(cat_full):
    f, s = cat_full
    prof = multi_resonance(orbit(f, X0, 3000), s, CAT_EX, 0.05, window=100)
    rep = liaopesin_check(prof, 1.0, [1000, 1500], 25)
    for r in rep.residuals.values():
        np.testing.assert_allclose(r, 0.05 * 25, atol=1e-10)
    assert rep.passed()


def test_liaopesin_on_block(pert_profiles):
    multi, _ = pert_profiles
    H = resonance_times(multi, 3.0).times
    H = H[(H >= 150) & (H + 150 <= multi.n_computed)][:200]
    assert liaopesin_check(multi, 3.0, H, 150).passed()


@pytest.fixture(scope="module")
def pert_cycle(pert):
    f, _ = pert
    # continue the cat map's period-2 orbit into the perturbed map
    cyc, rn = periodic_newton(f, np.array([[0.2, 0.4], [0.8, 0.6]]))
    assert rn <= 1e-13
    return cyc


def test_forward_backward_exponents(pert, pert_cycle):
    f, _ = pert
    s = default_splitting(f, full=True)
    fw = periodic_exponents(f, s, pert_cycle)
    bw = periodic_exponents(f, s, pert_cycle, backward=True)
    for a, b in zip(fw, bw):
        np.testing.assert_allclose(a, b, atol=1e-8)
    assert fw[0][0] > 0 > fw[-1][0]


def test_cat_cycle_spectrum(cat_full):
    f, s = cat_full
    per = periodic_exponents(f, s, np.array([[0.2, 0.4], [0.8, 0.6]]))
    m = match_spectra(CAT_EX, s.dims, per, 1e-9)
    assert m.passed and m.max_gap <= 1e-9 and m.multiplicities == [1, 1]


def test_match_spectra_lengths():
    with pytest.raises(ValueError):
        match_spectra([1.0, -1.0], [1, 1], [[1.0]], 0.1)


def test_find_recurrences_sorted():
    pts = np.array([[0.1, 0.1], [0.5, 0.5], [0.1, 0.1 + 1e-4], [0.5, 0.5 + 1e-5], [0.9, 0.1]])
    rec = find_recurrences(pts, 1e-3)
    assert list(rec.lag) == [2, 2] and list(rec.start) == [1, 0]
    assert len(find_recurrences(pts, 1e-3, lag_min=3)) == 0
    mask = np.array([True, False, True, False, True])
    assert list(find_recurrences(pts, 1e-3, mask=mask).start) == [0]


def test_horseshoe_spectrum_audit(cat_full):
    f, s = cat_full
    model = SimpleNamespace(alphabet=np.random.default_rng(5).random((30, 2)))
    good = horseshoe_spectrum_audit(model, f, s, 12, CAT_EX, 0.05)
    assert good.passed and np.abs(good.margins_upper - 0.6).max() <= 1e-10
    bad = horseshoe_spectrum_audit(model, f, s, 12, (L - 0.1, -L), 0.05)
    assert not bad.passed and bad.to_dict()["failures"] == 30
