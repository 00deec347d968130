"""Independent reference computations and the values frozen from them.

Nothing here imports nuhyp. Each frozen constant sits next to the function that
produced it; test_oracles.py checks that the two still agree.
"""

import math

import numpy as np

CAT = np.array([[2, 1], [1, 1]])

# roots of x^2 - 3x + 1, the characteristic polynomial of CAT
LAMBDA_PLUS = (3 + math.sqrt(5)) / 2
LAMBDA_MINUS = (3 - math.sqrt(5)) / 2
LOG_LAMBDA = 0.9624236501192069

# |det(CAT^n - I)| for n = 1..12
LEFSCHETZ = {1: 1, 2: 5, 3: 16, 4: 45, 5: 121, 6: 320, 7: 841, 8: 2205, 9: 5776, 10: 15125,
             11: 39601, 12: 103680}

# perturbed cat, delta = 0.1, from x0 = (0.3, 0.7): long-orbit exponents (chi_E^-, chi_F^+)
PERTURBED_EXPONENTS = (0.96223, -0.96475)
PERTURBED_EXPONENT_TOL = 5e-3


def char_roots(A):
    tr = A[0][0] + A[1][1]
    det = A[0][0] * A[1][1] - A[0][1] * A[1][0]
    disc = math.sqrt(tr * tr - 4 * det)
    return (tr + disc) / 2, (tr - disc) / 2


def cat_eigvecs():
    """Unit eigenvectors (unstable, stable) of CAT from (A - lambda I) v = 0."""
    u = np.array([1.0, LAMBDA_PLUS - 2])
    s = np.array([1.0, LAMBDA_MINUS - 2])
    return u / np.linalg.norm(u), s / np.linalg.norm(s)


def lucas(n):
    a, b = 2, 1
    for _ in range(n):
        a, b = b, a + b
    return a


def lefschetz_cat(n):
    """#Fix(CAT^n) = |2 - tr(CAT^n)| = L_{2n} - 2, exact integer."""
    return lucas(2 * n) - 2


def cat_step(x):
    x = np.asarray(x, dtype=float)
    return np.mod(CAT @ x, 1.0)


def torus_diff(a, b):
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return d - np.round(d)


def cat_single_jump_shadow(x0, d):
    """Shadow at x_0 of a true-orbit chain whose only jump d lands at x_0.

    Forward of x_0 the chain is a true orbit, so z - x_0 is stable; backward it
    follows x_0 - d, so z - (x_0 - d) is unstable. Hence z = x_0 - P_s d.
    """
    u, s = cat_eigvecs()
    V = np.column_stack([u, s])
    _, cs = np.linalg.solve(V, np.asarray(d, dtype=float))
    return np.mod(np.asarray(x0, dtype=float) - cs * s, 1.0)


def push_logs(jac, frames, start, steps):
    """log |Df^steps v| for the unit vector frames[start], by repeated multiplication."""
    v = frames[start].copy()
    tot = 0.0
    for i in range(start, start + steps):
        v = jac[i] @ v
        nv = np.linalg.norm(v)
        tot += math.log(nv)
        v /= nv
    return tot


def _unit_step(mats, V):
    W = np.einsum("nij,nj->ni", mats, V)
    nw = np.linalg.norm(W, axis=1)
    return W / nw[:, None], np.log(nw)


def brute_levels(jac, fE, fF, exponents, eps, ns, W):
    """(log a1_n, log a2_n) at the indices ns by explicit sup over pushed products.

    a1_n: sup over k <= n of the bounds over [k, n); a2_n: sup over j <= W of the
    bounds over [n, n + j). E vectors are pushed forward (stable direction of
    growth); F vectors are pulled back from the far end with the inverse
    derivative, which is the numerically stable way to get |Df^j|F|.
    """
    chiE, chiF = exponents
    ns = np.asarray(ns, dtype=int)
    jinv = np.linalg.inv(jac)
    top = int(ns.max())
    # a1, E part: one forward sweep carrying every start vector
    vE = np.array(fE[:top], dtype=float)
    lE = np.zeros(top)
    at_n = {0: 0.0}
    want = set(ns.tolist())
    for i in range(top):
        vE[: i + 1], lg = _unit_step(np.broadcast_to(jac[i], (i + 1, 2, 2)), vE[: i + 1])
        lE[: i + 1] += lg
        if i + 1 in want:
            steps = i + 1 - np.arange(i + 1)
            at_n[i + 1] = max(0.0, float(((chiE - eps) * steps - lE[: i + 1]).max()))
    a1 = np.array([at_n[n] for n in ns])
    # a1, F part: pull F(x_n) back to every k < n
    vF = np.array(fF[ns], dtype=float)
    lF = np.zeros(len(ns))
    for i in range(top - 1, -1, -1):
        act = ns > i
        vF[act], lg = _unit_step(np.broadcast_to(jinv[i], (int(act.sum()), 2, 2)), vF[act])
        lF[act] += lg
        a1[act] = np.maximum(a1[act], -lF[act] - (chiF + eps) * (ns[act] - i))
    # a2: E pushed forward from n, F pulled back from every end n + j
    a2 = np.zeros(len(ns))
    v = np.array(fE[ns], dtype=float)
    tot = np.zeros(len(ns))
    for j in range(1, W + 1):
        v, lg = _unit_step(jac[ns + j - 1], v)
        tot += lg
        a2 = np.maximum(a2, (chiE - eps) * j - tot)
    nn, jj = np.meshgrid(ns, np.arange(1, W + 1), indexing="ij")
    nn, jj = nn.ravel(), jj.ravel()
    u = np.array(fF[nn + jj], dtype=float)
    pulled = np.zeros(len(nn))
    for back in range(W):
        act = jj > back
        u[act], lg = _unit_step(jinv[nn[act] + jj[act] - 1 - back], u[act])
        pulled[act] += lg
    fb = (-pulled - (chiF + eps) * jj).reshape(len(ns), W)
    a2 = np.maximum(a2, fb.max(axis=1))
    return a1, a2


def push_logs_stable(jac, fE, fF, start, steps):
    """(log |Df^steps|E(x_start)|, log |Df^steps|F(x_start)|) with F pulled back from the end."""
    le = push_logs(jac, fE, start, steps)
    u = np.array(fF[start + steps], dtype=float)
    lf = 0.0
    for i in range(start + steps - 1, start - 1, -1):
        u = np.linalg.solve(jac[i], u)
        nu = np.linalg.norm(u)
        lf -= math.log(nu)
        u /= nu
    return le, lf


def product_residuals(jac, fE, fF, exponents, eps, t, j, k):
    """Four block-bound residuals at index j: E lower and F upper, backward and forward."""
    chiE, chiF = exponents
    lt = math.log(t)
    out = []
    for start in (j - k, j):
        le, lf = push_logs_stable(jac, fE, fF, start, k)
        out += [le - (k * (chiE - eps) - lt), (k * (chiF + eps) + lt) - lf]
    return out


def dn_brute(step, x, y, n):
    best = 0.0
    for _ in range(n):
        best = max(best, float(np.linalg.norm(torus_diff(x, y))))
        x, y = step(x), step(y)
    return best


def trig_lebesgue(k):
    """Lebesgue integral of cos(2 pi k.x) and sin(2 pi k.x) on the torus."""
    return (1.0 if not any(k) else 0.0), 0.0
