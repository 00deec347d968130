"""Frozen constants agree with the closed forms that produced them."""

import numpy as np

import oracles as orc


def test_log_lambda():
    lp, lm = orc.char_roots(orc.CAT)
    assert abs(orc.LOG_LAMBDA - np.log(lp)) <= 1e-16
    assert lp == orc.LAMBDA_PLUS
    assert abs(lp * lm - 1) < 1e-15


def test_lefschetz_table():
    for n, v in orc.LEFSCHETZ.items():
        assert v == orc.lefschetz_cat(n)
        # |det(A^n - I)| = trace(A^n) - 2 for this matrix
        assert v == round(np.trace(np.linalg.matrix_power(orc.CAT, n))) - 2


def test_eigvecs():
    u, s = orc.cat_eigvecs()
    A = np.asarray(orc.CAT, dtype=float)
    np.testing.assert_allclose(A @ u, orc.LAMBDA_PLUS * u, atol=1e-14)
    np.testing.assert_allclose(A @ s, orc.LAMBDA_MINUS * s, atol=1e-15)


def test_single_jump_oracle_is_a_shadow():
    # x0 - P_s d: its backward orbit meets the pre-jump chain, the forward one stays on x0's
    u, s = orc.cat_eigvecs()
    x0 = np.array([0.4, 0.1])
    d = 1e-6 * (0.3 * u + 0.7 * s)
    z = orc.cat_single_jump_shadow(x0, d)
    np.testing.assert_allclose(orc.torus_diff(z, x0), -1e-6 * 0.7 * s, atol=1e-16)
