import numpy as np
import pytest

import oracles as orc
from conftest import X0
from nuhyp.cocycle import orbit
from nuhyp.manifolds import (ChartError, ChebGraph, ConeField, ConvergenceError, HypothesisError, AdmissibleDisk,
                             OrbitFrames, certify_slope, cone_membership, cone_width, intersect_disks,
                             local_stable_manifold, local_unstable_manifold, pullback, straight_disk, tangency,
                             trap_check)
from nuhyp.systems import torus_distance

CAT_EX = (orc.LOG_LAMBDA, -orc.LOG_LAMBDA)
U, S = orc.cat_eigvecs()


def test_cone_membership_margin():
    cone = ConeField(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.5)
    assert cone_membership([0.4, 1.0], cone) == (True, pytest.approx(0.1))
    ok, m = cone_membership([0.6, 1.0], cone)
    assert not ok and m == pytest.approx(-0.1)
    with pytest.raises(ValueError):
        cone_membership([0, 0], cone)
    assert cone_width([1.0, 0.0], [1, 0], [0, 1]) == np.inf
    assert cone_width([0.3, 2.0], [1, 0], [0, 1]) == pytest.approx(0.15)


def test_cheb_graph_roundtrip():
    x = ChebGraph.nodes(-0.2, 0.3, 12)
    g = ChebGraph.from_values(-0.2, 0.3, x ** 3 - x)
    s = np.linspace(-0.2, 0.3, 41)
    np.testing.assert_allclose(g(s), s ** 3 - s, atol=1e-14)
    np.testing.assert_allclose(g.deriv(s), 3 * s ** 2 - 1, atol=1e-12)
    assert 0.999 <= certify_slope(g) <= 1.0 + 1e-9


def test_cat_pullback_keeps_stable_line(cat):
    f, _ = cat
    x = np.array([0.2, 0.4])
    frame = np.column_stack([S, U])
    nxt = straight_disk(f.forward(x), S, U, "F", 0.05)
    d = pullback(nxt, f, x, frame, 0.05)
    s = np.linspace(d.lo, d.hi, 33)
    assert np.abs(d.graph(s)).max() <= 1e-14
    assert d.radius == pytest.approx(0.05, rel=1e-6)


def test_pullback_anchor_mismatch(cat):
    f, _ = cat
    nxt = straight_disk([0.5, 0.5], S, U, "F", 0.05)
    with pytest.raises(ChartError):
        pullback(nxt, f, [0.1, 0.1], np.column_stack([S, U]), 0.05)


@pytest.fixture(scope="module")
def cat_frames(cat):
    f, s = cat
    return OrbitFrames(f, s, orbit(f, X0, 200).points)


def test_cat_stable_disk_is_eigenline(cat, cat_frames):
    _, s = cat
    disk, cert = local_stable_manifold(cat_frames, [20, 40, 60], 1.0, 0.05, 0.05, s, CAT_EX, audit_k=20, n_pairs=5)
    ss = np.linspace(disk.lo, disk.hi, 33)
    assert np.abs(disk.graph(ss)).max() <= 1e-12
    assert tangency(disk, s) <= 1e-12 and cert.audit_pass


def test_cat_unstable_disk_is_eigenline(cat, cat_frames):
    _, s = cat
    disk, cert = local_unstable_manifold(cat_frames, [20, 40, 60], 1.0, 0.05, 0.05, s, CAT_EX,
                                         audit_k=20, n_pairs=5)
    assert disk.base == "E"
    P = disk.points(np.array([disk.lo, disk.hi]))
    v = P[1] - P[0]
    assert abs(v[0] * U[1] - v[1] * U[0]) / np.linalg.norm(v) <= 1e-12
    assert torus_distance(disk.center, cat_frames.points[-1]) <= 1e-15


def test_zero_radius(cat, cat_frames):
    _, s = cat
    disk, cert = local_stable_manifold(cat_frames, [20], 1.0, 0.05, 0.05, s, CAT_EX, radius=0)
    assert disk.radius == 0 and cert.audit_pass


def test_no_returns_fails(cat, cat_frames):
    _, s = cat
    with pytest.raises(ConvergenceError):
        local_stable_manifold(cat_frames, [], 1.0, 0.05, 0.05, s, CAT_EX)


def test_intersect_eigenlines():
    x = np.array([0.3, 0.3])
    dE = straight_disk(x, U, S, "E", 0.1)
    dF = straight_disk(x + 0.01 * U, S, U, "F", 0.1)
    p = intersect_disks(dE, dF)
    assert torus_distance(p, x + 0.01 * U) <= 1e-15


def test_intersect_disjoint():
    x = np.array([0.3, 0.3])
    dE = straight_disk(x, U, S, "E", 0.01)
    dF = straight_disk(x + 0.05 * U, S, U, "F", 0.01)
    with pytest.raises(ChartError):
        intersect_disks(dE, dF)


def test_disk_json_roundtrip():
    g = ChebGraph.from_values(-0.1, 0.1, 0.01 * ChebGraph.nodes(-0.1, 0.1, 8) ** 2)
    d = AdmissibleDisk(np.array([0.1, 0.2]), np.column_stack([S, U]), "F", g, 0.0, 0.1)
    e = AdmissibleDisk.from_dict(d.to_dict())
    np.testing.assert_allclose(e.points(np.array([-0.05, 0.07])), d.points(np.array([-0.05, 0.07])), atol=1e-15)


def test_trap_check_cat(cat):
    f, s = cat
    orb = OrbitFrames(f, s, orbit(f, X0, 120).points)
    B = 1e-4 * np.outer([0.5, -1.0, 1.0], S)
    n = trap_check(orb, B, 0.1, [5, 10], 1.0, 0.05, 0.05, s, CAT_EX, budget=15)
    assert n == 5
    with pytest.raises(HypothesisError):
        trap_check(orb, 1e-4 * np.outer([1.0], U), 0.1, [10], 1.0, 0.05, 0.05, s, CAT_EX, budget=15)
