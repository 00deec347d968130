import json
from pathlib import Path

import numpy as np
import pytest

import oracles as orc
from nuhyp.shadowing import (PseudoOrbit, PseudoOrbitError, PseudoOrbitParseError, ShadowResult, close_periodic,
                             lift_pseudo_orbit, linear_single_jump, measure_c0, periodic_newton,
                             periodic_pseudo_orbit, rate_lambda, shadow_constants, shadow_constructive,
                             shadow_newton, true_orbit_pseudo_orbit, verify_envelope)
from nuhyp.systems import torus_distance

GOLDEN = Path(__file__).parent / "golden" / "cat_single_jump.json"
L = orc.LOG_LAMBDA


@pytest.fixture(scope="module")
def cat_const(cat):
    _, s = cat
    return shadow_constants((L, -L), 0.05, 1.0, 0.1, measure_c0(s, np.random.default_rng(0).random((50, 2))))


def test_constants_ordering(cat_const):
    c = cat_const
    assert c.r1 < c.r and 0 < c.tau < 1 and 0 < c.alpha < 1
    assert c.N2 >= c.N1 >= 1 and c.beta0 > 0
    assert c.lam == pytest.approx(rate_lambda((L, -L), 0.05))


def test_true_orbit_shadows_itself(cat, cat_const):
    f, s = cat
    po = true_orbit_pseudo_orbit(f, [0.1234, 0.5678], 20, 2)
    assert po.beta == 0 and np.all(po.jumps(f) <= 1e-12)
    for res in (shadow_constructive(f, s, po, cat_const), shadow_newton(f, po)):
        assert torus_distance(res.z, po.x(0)) <= 1e-12
        assert res.max_error <= 1e-12


def test_golden_single_jump(cat, cat_const):
    f, s = cat
    g = json.loads(GOLDEN.read_text())
    po = PseudoOrbit(np.array(g["points"]), [g["n_k"]] * (2 * g["K"] + 1), g["beta"])
    d = np.array(g["jump"])
    x0 = po.x(0)
    # with zero lead time the closed form is x0 - d + P_u d = x0 - P_s d
    z_cf = linear_single_jump(f.A, x0 - d, 0, d)
    assert np.abs(orc.torus_diff(z_cf, orc.cat_single_jump_shadow(x0, d))).max() <= 1e-15
    assert np.abs(orc.torus_diff(z_cf, g["z"])).max() <= g["tolerance"]
    zn = shadow_newton(f, po).z
    assert np.abs(orc.torus_diff(zn, g["z"])).max() <= g["tolerance"]


def test_envelope_negative_control(cat, cat_const):
    f, s = cat
    g = json.loads(GOLDEN.read_text())
    po = PseudoOrbit(np.array(g["points"]), [g["n_k"]] * 7, g["beta"])
    res = shadow_newton(f, po, lam=cat_const.lam, C=cat_const.C1)
    assert res.envelope_pass
    bad = ShadowResult(res.z, [e.copy() for e in res.errors], {}, False, "x")
    bad.errors[3][10] = 10 * cat_const.C1 * po.beta
    assert not verify_envelope(bad, cat_const.C1, po.beta, cat_const.lam).passed


def test_text_roundtrip():
    po = PseudoOrbit(np.array([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]]), [5, 6, 7], 1e-7, 2.0)
    back = PseudoOrbit.from_text(po.to_text())
    assert np.array_equal(back.points, po.points) and np.array_equal(back.ns, po.ns)
    assert back.beta == 1e-7 and back.block_level == 2.0
    assert po.s(1) == 6 and po.s(-1) == -5


@pytest.mark.parametrize("text,line", [
    ("-1 0.1 0.2 5\n0 0.1 0.2\n1 0.1 0.2 5\n", 2),
    ("-1 0.1 0.2 5\n0 0.1 nan 5\n1 0.1 0.2 5\n", 2),
    ("# beta = 0\n-1 0.1 0.2 5\n1 0.1 0.2 5\n", 3),
    ("-1 0.1 0.2 5\n0 0.1 0.2 0\n1 0.1 0.2 5\n", 2),
    ("0 0.1 0.2 5\n1 0.1 0.2 5\n", 1),
])
def test_parse_errors(text, line):
    with pytest.raises(PseudoOrbitParseError) as ei:
        PseudoOrbit.from_text(text)
    assert ei.value.lineno == line


def test_even_length_rejected():
    with pytest.raises(PseudoOrbitError):
        PseudoOrbit(np.zeros((2, 2)), [3, 3], 0.0)


def test_cat_closing_at_origin(cat):
    f, s = cat
    cert = close_periodic(f, s, periodic_pseudo_orbit([0.0, 0.0], 7, K=1, fmap=f))
    assert np.all(cert.p == 0) and cert.residual == 0 and cert.passed
    assert cert.floquet["E"] == pytest.approx(7 * L, abs=1e-10)
    assert cert.floquet["F"] == pytest.approx(-7 * L, abs=1e-10)


def test_periodic_newton_on_exact_cycle(cat):
    f, _ = cat
    cyc = np.array([[0.0, 0.0]])
    out, rn = periodic_newton(f, cyc)
    assert rn == 0 and np.array_equal(out, cyc)
    # period-2 orbit of the cat map
    two = np.array([[0.2, 0.4], [0.8, 0.6]])
    assert torus_distance(f.forward(two[0]), two[1]) <= 1e-15
    out, rn = periodic_newton(f, two + 1e-6)
    assert rn <= 1e-15 and np.abs(orc.torus_diff(out, two)).max() <= 1e-14


def test_close_rejects_nonperiodic(cat):
    f, s = cat
    po = PseudoOrbit(np.array([[0.1, 0.1], [0.2, 0.1], [0.1, 0.1]]), [7, 7, 7], 1e-3)
    with pytest.raises(PseudoOrbitError):
        close_periodic(f, s, po)


def test_lift_identity_and_even(cat):
    f, _ = cat
    po = PseudoOrbit(np.random.default_rng(3).random((5, 2)), [4, 6, 8, 10, 12], 1e-8)
    one = lift_pseudo_orbit(f, po, 1)
    assert np.array_equal(one.po.points, po.points) and np.array_equal(one.po.ns, po.ns)
    assert one.beta_hat == po.beta
    two = lift_pseudo_orbit(f, po, 2)
    assert np.array_equal(two.po.points, po.points) and list(two.po.ns) == [2, 3, 4, 5, 6]
    assert two.beta_hat >= po.beta
    with pytest.raises(PseudoOrbitError):
        lift_pseudo_orbit(f, po, 3)
    with pytest.raises(PseudoOrbitError):
        lift_pseudo_orbit(f, po, 2, phases=[0, 2, 0, 0, 0])
