import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nuhyp.horseshoe import MeasureDistance, dn_distance, dn_from_windows, orbit_windows, separated_set
from nuhyp.systems import perturbed_cat

F = perturbed_cat(0.1)
MD = MeasureDistance()
unit = st.floats(0, 1, exclude_max=True, allow_nan=False)
point = st.tuples(unit, unit).map(np.array)
vec = arrays(np.float64, 20, elements=st.floats(-1, 1, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(point, point, point, st.integers(1, 8))
def test_dn_is_a_metric(x, y, z, n):
    dxy, dyz, dxz = dn_distance(F, x, y, n), dn_distance(F, y, z, n), dn_distance(F, x, z, n)
    assert dxy >= 0 and dxy == dn_distance(F, y, x, n)
    assert dxz <= dxy + dyz + 1e-12
    assert dn_distance(F, x, y, n) <= dn_distance(F, x, y, n + 1)


@settings(max_examples=25, deadline=None)
@given(point, st.floats(0.01, 0.4), st.integers(2, 6))
def test_separated_set_valid_and_maximal(x0, delta, n):
    pts = F.orbit_points(x0, 200 + n)
    W = orbit_windows(pts, np.arange(200), n)
    keep = separated_set(W, delta)
    K = W[keep]
    for i in range(len(K)):
        assert np.all(dn_from_windows(K[i + 1:], K[i][None]) >= delta)
    rest = np.setdiff1d(np.arange(200), keep)
    for j in rest:
        assert dn_from_windows(K, W[j][None]).min() < delta


@settings(max_examples=100, deadline=None)
@given(vec, vec, vec)
def test_measure_distance_pseudometric(a, b, c):
    assert MD.value(a, b) == MD.value(b, a)
    assert MD.value(a, a) == 0
    assert MD.value(a, c) <= MD.value(a, b) + MD.value(b, c) + 1e-15
