import numpy as np
import pytest

import oracles as orc
from nuhyp.systems import (ConstantSplitting, OrbitCapError, cat_map, cone_iterate_splitting, default_splitting,
                           evaluate, get_map, identity_map, load_coefficient_file, perturbed_cat,
                           principal_sine, reverse, splitting_invariance_residual, torus_distance, wrap)


def test_evaluate_fixed_point_and_hand_step():
    f = cat_map()
    assert np.array_equal(evaluate(f, [0, 0], 5), [0, 0])
    np.testing.assert_allclose(evaluate(f, [0.1, 0.2], 1), [0.4, 0.3], atol=1e-15)
    np.testing.assert_array_equal(evaluate(f, [0.25, 0.5], 0), [0.25, 0.5])


def test_evaluate_negative_steps_invert():
    f = perturbed_cat(0.1)
    x = np.array([0.3, 0.7])
    y = evaluate(f, x, 7)
    assert torus_distance(evaluate(f, y, -7), x) < 1e-9


def test_evaluate_cap():
    with pytest.raises(OrbitCapError):
        evaluate(cat_map(), [0.1, 0.1], 11, cap=10)


def test_derivative_matches_finite_difference():
    f = perturbed_cat(0.1)
    x = np.array([0.37, 0.81])
    h = 1e-6
    J = f.derivative(x)
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (f.lifted(x + e) - f.lifted(x - e)) / (2 * h)
        np.testing.assert_allclose(J[:, j], fd, atol=1e-8)


def test_inverse_roundtrip_batch():
    f = perturbed_cat(0.1)
    pts = np.random.default_rng(0).random((200, 2))
    back = f.inverse(f.forward(pts))
    assert np.abs(wrap(back - pts + 0.5) - 0.5).max() < 1e-12


def test_reverse_swaps_directions():
    f = perturbed_cat(0.1)
    g = reverse(f)
    x = np.array([0.2, 0.9])
    assert torus_distance(g.forward(f.forward(x)), x) < 1e-12
    assert reverse(g) is f


def test_registry():
    assert get_map("cat").descriptor == "cat"
    assert get_map("perturbed-cat:delta=0.2").params["delta"] == 0.2
    with pytest.raises(KeyError):
        get_map("baker")
    with pytest.raises(ValueError):
        get_map("perturbed-cat:delta")


def test_coefficient_file(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("matrix = 2 1; 1 1\nterm = 0 0.01 sin 1 0  # small\nname = mine\n")
    f = load_coefficient_file(p)
    assert f.descriptor == "mine" and len(f.terms) == 1
    assert get_map(f"file:{p}").descriptor == "mine"
    p.write_text("matrix = 2 1; 1 1\nbogus = 3\n")
    with pytest.raises(ValueError, match=":2:"):
        load_coefficient_file(p)
    p.write_text("matrix = 2 0; 0 1\n")
    with pytest.raises(ValueError, match="unimodular"):
        load_coefficient_file(p)


def test_cat_exact_frames_invariant():
    f = cat_map()
    s = default_splitting(f)
    assert isinstance(s, ConstantSplitting)
    for x in np.random.default_rng(1).random((5, 2)):
        assert splitting_invariance_residual(f, s, x) <= 1e-14


def test_identity_residual_zero():
    f = identity_map()
    s = ConstantSplitting([np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])])
    assert splitting_invariance_residual(f, s, [0.3, 0.4]) == 0.0


def test_cone_iteration_cat_eigenvector():
    f = cat_map()
    seed = [np.array([[1.0], [0.3]]), np.array([[0.2], [-1.0]])]
    s = cone_iterate_splitting(f, seed_frames=seed, depth=60)
    E, F = s.frames(np.array([0.1, 0.2]))
    u, st = orc.cat_eigvecs()
    assert principal_sine(E, u[:, None]) <= 1e-12
    assert principal_sine(F, st[:, None]) <= 1e-12


def test_delta_zero_is_cat():
    f = perturbed_cat(0.0)
    assert not f.terms
    x = np.random.default_rng(2).random((10, 2))
    np.testing.assert_array_equal(f.forward(x), cat_map().forward(x))


def test_perturbed_cone_frames_depth_consistent():
    f = perturbed_cat(0.1)
    x = np.random.default_rng(3).random((20, 2))
    a = cone_iterate_splitting(f, depth=60).frames(x)
    b = cone_iterate_splitting(f, depth=120).frames(x)
    for A, B in zip(a, b):
        assert principal_sine(A, B).max() <= 1e-10


def test_perturbed_invariance_residual_small():
    f = perturbed_cat(0.1)
    s = default_splitting(f)
    for x in np.random.default_rng(4).random((5, 2)):
        assert splitting_invariance_residual(f, s, x) <= 1e-10


def test_frames_on_orbit_agree_with_pointwise():
    f = perturbed_cat(0.1)
    s = default_splitting(f)
    pts = f.orbit_points(np.array([0.3, 0.7]), 50)
    on = s.frames_on_orbit(f, pts)
    pw = s.frames(pts)
    for A, B in zip(on, pw):
        assert principal_sine(A, B).max() <= 1e-10
