"""Katok-style horseshoes: dynamical balls, separated sets, symbol selection, coding and audits."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .blocks import epsilon_zero, resonance_sequences, resonance_times
from .cocycle import OrbitSegment, lyapunov_estimate
from .shadowing import periodic_newton
from .systems import DiscreteMap, Splitting, TorusMap, wrap


class EmptySelectionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# d_n metric


def _torus_norm(v):
    v = v - np.round(v)
    return np.sqrt(np.sum(v * v, axis=-1))


def dn_distance(fmap: DiscreteMap, x, y, n: int):
    """max_{0<=k<n} d(f^k x, f^k y); broadcasts over leading axes."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x = wrap(np.asarray(x, dtype=float))
    y = wrap(np.asarray(y, dtype=float))
    best = _torus_norm(y - x)
    for _ in range(n - 1):
        x, y = fmap.forward(x), fmap.forward(y)
        best = np.maximum(best, _torus_norm(y - x))
    return best


def orbit_windows(points, indices, n):
    """(M, n, d) array of points[i:i+n] for i in indices."""
    idx = np.asarray(indices, dtype=np.int64)
    return points[idx[:, None] + np.arange(n)[None, :]]


def dn_from_windows(a, b):
    return _torus_norm(b - a).max(axis=-1)


@dataclass
class DynamicalBallIndex:
    """d_n balls of radius rho around stored centers."""

    fmap: DiscreteMap
    n: int
    rho: float
    centers: np.ndarray
    orbits: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.centers = c
        self.orbits = self._orbit(c)

    def _orbit(self, pts):
        out = np.empty((len(pts), self.n, pts.shape[-1]))
        x = wrap(pts)
        for k in range(self.n):
            out[:, k] = x
            x = self.fmap.forward(x)
        return out

    def distances(self, y):
        """d_n from y to every center."""
        oy = self._orbit(np.atleast_2d(y))[0]
        return dn_from_windows(self.orbits, oy[None])

    def contains(self, y):
        """Indices of the balls B_n(center, rho) that contain y."""
        return np.flatnonzero(self.distances(y) < self.rho)

    def covered(self, ys):
        return np.array([len(self.contains(y)) > 0 for y in np.atleast_2d(ys)])


# ---------------------------------------------------------------------------
# separated sets


def _all_pairs(M):
    i, j = np.triu_indices(M, k=1)
    return np.stack([i, j], axis=1)


def separated_set(windows, delta, prefilter=None, order=None):
    """Greedy maximal subset of rows of ``windows`` (M, n, d) pairwise d_n-separated by >= delta.

    ``prefilter`` is a radius at the middle step below which pairs are checked
    exactly; pairs farther apart there are assumed separated. Without it every
    pair is examined. Returns the kept row indices in processing order.
    """
    W = np.asarray(windows, dtype=float)
    M = len(W)
    if M == 0:
        return np.zeros(0, dtype=int)
    if delta <= 0:
        return np.arange(M) if order is None else np.asarray(order)
    if prefilter is None:
        pairs = _all_pairs(M) if M <= 4000 else None
        if pairs is None:
            raise ValueError("give a prefilter radius for more than 4000 points")
    else:
        mid = W[:, W.shape[1] // 2] % 1.0
        pairs = cKDTree(mid, boxsize=1.0).query_pairs(prefilter, output_type="ndarray")
    if len(pairs):
        close = np.zeros(len(pairs), dtype=bool)
        for lo in range(0, len(pairs), 200_000):
            p = pairs[lo: lo + 200_000]
            close[lo: lo + len(p)] = dn_from_windows(W[p[:, 0]], W[p[:, 1]]) < delta
        pairs = pairs[close]
    rank = np.arange(M) if order is None else np.argsort(np.asarray(order), kind="stable")
    # each conflict is charged to the later point in processing order
    if order is not None:
        pos = np.empty(M, dtype=int)
        pos[np.asarray(order)] = np.arange(M)
    else:
        pos = rank
    later = np.where(pos[pairs[:, 0]] > pos[pairs[:, 1]], pairs[:, 0], pairs[:, 1]) if len(pairs) else pairs
    earlier = np.where(pos[pairs[:, 0]] > pos[pairs[:, 1]], pairs[:, 1], pairs[:, 0]) if len(pairs) else pairs
    nbrs = [[] for _ in range(M)]
    for a, b in zip(np.asarray(later).tolist(), np.asarray(earlier).tolist()):
        nbrs[a].append(b)
    keep = np.zeros(M, dtype=bool)
    seq = np.arange(M) if order is None else np.asarray(order)
    for i in seq.tolist():
        if not any(keep[j] for j in nbrs[i]):
            keep[i] = True
    return np.array([i for i in seq.tolist() if keep[i]], dtype=int)


def min_pairwise_dn(windows, stop_below=None):
    """Exhaustive min over pairs of d_n, pruning rows that are already separated."""
    W = np.asarray(windows, dtype=float)
    M, n = W.shape[:2]
    best = np.inf
    for i in range(M - 1):
        rest = np.arange(i + 1, M)
        cur = np.zeros(len(rest))
        for k in range(n):
            cur = np.maximum(cur, _torus_norm(W[rest, k] - W[i, k]))
            live = cur < best
            rest, cur = rest[live], cur[live]
            if not len(rest):
                break
        if len(cur):
            best = min(best, float(cur.min()))
        if stop_below is not None and best < stop_below:
            break
    return best


# ---------------------------------------------------------------------------
# partitions


@dataclass
class Partition:
    """Boxes B(floor(B^{-1} x / sides)) in a fixed linear frame, cut at the unit-square edges."""

    basis: np.ndarray  # columns span R^d
    sides: np.ndarray

    def __post_init__(self):
        self.basis = np.asarray(self.basis, dtype=float)
        self.sides = np.asarray(self.sides, dtype=float)
        self._inv = np.linalg.inv(self.basis)

    def keys(self, points):
        x = np.asarray(points, dtype=float) % 1.0
        c = np.floor((x @ self._inv.T) / self.sides).astype(np.int64)
        # pack integer coordinates into one key
        out = np.zeros(c.shape[:-1], dtype=np.int64)
        for j in range(c.shape[-1]):
            out = out * 1_000_003 + (c[..., j] + 500_000)
        return out

    @property
    def diameter(self):
        corners = np.array(list(itertools.product((-1.0, 1.0), repeat=len(self.sides))))
        return float(np.max(np.linalg.norm((corners * self.sides) @ self.basis.T, axis=1)))

    def count(self, points):
        return len(np.unique(self.keys(points)))

    def to_dict(self):
        return {"basis": self.basis.tolist(), "sides": self.sides.tolist(), "diameter": self.diameter}


def grid_partition(rho, d=2):
    """Square grid with cell diameter <= rho whose side divides 1."""
    q = math.ceil(math.sqrt(d) / rho)
    return Partition(np.eye(d), np.full(d, 1.0 / q))


def adapted_partition(s: Splitting, x_ref, a_F, expansion):
    """Boxes in the splitting frame at x_ref: side a_F along F, a_F * expansion along E."""
    fr = s.frames(np.asarray(x_ref, dtype=float))
    basis = np.concatenate([fr[0], fr[-1]], axis=-1)
    return Partition(basis, np.array([a_F * expansion, a_F]))


def shadow_scale(part: Partition, rate_E, tail):
    """Largest jump component that survives in a shadowing error: max(a_F, a_E e^{-rate_E}), with tails."""
    a_E, a_F = part.sides[0] * np.linalg.norm(part.basis[:, 0]), part.sides[-1] * np.linalg.norm(part.basis[:, -1])
    return float(max(a_F, a_E * math.exp(-rate_E)) * (1 + tail))


# ---------------------------------------------------------------------------
# test functions and the distance D


def trig_family(J=20, d=2):
    """(frequency, kind) of the first J real characters on T^d, by |k| then lexicographically."""
    R = 1
    while True:
        ks = [k for k in itertools.product(range(-R, R + 1), repeat=d) if any(k)]
        # one representative per +-k
        ks = [k for k in ks if k > tuple(-c for c in k)]
        if 2 * len([k for k in ks if np.dot(k, k) <= R * R]) >= J:
            break
        R += 1
    ks.sort(key=lambda k: (np.dot(k, k), tuple(-c for c in k)))
    fam = []
    for k in ks:
        fam.append((k, "cos"))
        fam.append((k, "sin"))
    return fam[:J]


def _eval_family(fam, points):
    x = np.asarray(points, dtype=float)
    K = np.array([k for k, _ in fam], dtype=float)
    ph = 2 * np.pi * (x @ K.T)
    is_sin = np.array([kind == "sin" for _, kind in fam])
    return np.where(is_sin, np.sin(ph), np.cos(ph))


@dataclass
class MeasureDistance:
    """D(mu, nu) = sum_j 2^{-j} |int phi_j dmu - int phi_j dnu| truncated at J."""

    J: int = 20
    family: list = None

    def __post_init__(self):
        if self.family is None:
            self.family = trig_family(self.J)

    def integrals(self, points, weights=None, chunk=1_000_000):
        pts = np.asarray(points, dtype=float)
        tot = np.zeros(self.J)
        wsum = 0.0
        for lo in range(0, len(pts), chunk):
            v = _eval_family(self.family, pts[lo: lo + chunk])
            w = np.ones(len(v)) if weights is None else np.asarray(weights[lo: lo + chunk], dtype=float)
            tot += w @ v
            wsum += w.sum()
        return tot / wsum

    def lebesgue(self):
        return np.zeros(self.J)

    def value(self, a, b):
        w = 0.5 ** np.arange(1, self.J + 1)
        return float(np.sum(w * np.abs(np.asarray(a) - np.asarray(b))))

    @property
    def tail(self):
        # each omitted term is at most 2 * 2^{-j}
        return 2.0 ** (1 - self.J)

    def upper(self, a, b):
        return self.value(a, b) + self.tail


def birkhoff_deviation(fam, points, indices, n, horizon, target):
    """max_{n<=m<=horizon} max_j |(1/m) sum_{i<m} phi_j(f^i x) - target_j| for each index."""
    out = np.empty(len(indices))
    for c, i in enumerate(np.asarray(indices)):
        v = _eval_family(fam, points[i: i + horizon])
        avg = np.cumsum(v, axis=0) / np.arange(1, horizon + 1)[:, None]
        out[c] = np.max(np.abs(avg[n - 1:] - target))
    return out


# ---------------------------------------------------------------------------
# Omega_{t,n}


@dataclass
class OmegaResult:
    indices: np.ndarray  # accepted indices into the orbit sample
    returns: np.ndarray  # (len(indices), len(ks)) bool: f^k x in P(x)
    ks: np.ndarray
    rejected: dict
    pointwise: dict  # pass fractions of the per-point density / Birkhoff tests
    collective: dict = field(default_factory=dict)


def density_radius(points, support):
    """Covering radius of ``support`` by ``points``: max over support of the distance to points."""
    tr = cKDTree(np.asarray(points) % 1.0, boxsize=1.0)
    d, _ = tr.query(np.asarray(support) % 1.0)
    return float(d.max())


def omega_filter(points, candidates, keys, n, epsilon, support, fam=None, target=None,
                 mode="pointwise", horizon=None, probe=500, seed=0):
    """Filter orbit indices down to Omega_{t,n}.

    ``points`` is the long orbit sample (row i+1 = f(row i)), ``keys`` its
    partition labels. In "pointwise" mode every candidate must pass all three
    tests. In "collective" mode only the recurrence is enforced per point; the
    density and Birkhoff tests are evaluated on a random probe of candidates
    for the record and re-imposed on the final alphabet as a whole.
    """
    if mode not in ("pointwise", "collective"):
        raise ValueError("mode must be 'pointwise' or 'collective'")
    cand = np.asarray(candidates, dtype=np.int64)
    ks = np.arange(n, int(math.floor((1 + epsilon) * n)) + 1)
    if horizon is None:
        horizon = 10 * n
    need = int(max(ks.max(), horizon, n + 1))
    cand = cand[cand + need < len(points)]
    fam = fam if fam is not None else trig_family()
    target = np.zeros(len(fam)) if target is None else np.asarray(target)
    ret = np.stack([keys[cand + k] == keys[cand] for k in ks], axis=1)
    rec = ret.any(axis=1)
    rejected = {"recurrence": int((~rec).sum()), "density": 0, "birkhoff": 0}
    sup = np.asarray(support) % 1.0

    def dense_ok(idx):
        ok = np.empty(len(idx), dtype=bool)
        for c, i in enumerate(idx):
            tr = cKDTree(points[i + 1: i + n + 1] % 1.0, boxsize=1.0)
            ok[c] = tr.query(sup, distance_upper_bound=epsilon / 2)[0].max() <= epsilon / 2
        return ok

    rng = np.random.default_rng(seed)
    if mode == "pointwise":
        idx = cand[rec]
        dok = dense_ok(idx)
        bok = birkhoff_deviation(fam, points, idx, n, horizon, target) <= epsilon / 4
        rejected["density"] = int((~dok).sum())
        rejected["birkhoff"] = int((dok & ~bok).sum())
        keep = np.zeros(len(cand), dtype=bool)
        keep[np.flatnonzero(rec)[dok & bok]] = True
        frac = {"density": float(dok.mean()) if len(dok) else 0.0,
                "birkhoff": float(bok.mean()) if len(bok) else 0.0, "probe": int(len(idx))}
    else:
        keep = rec
        pr = rng.choice(cand[rec], size=min(probe, int(rec.sum())), replace=False) if rec.any() else cand[:0]
        pr = np.sort(pr)
        frac = {"density": float(dense_ok(pr).mean()) if len(pr) else 0.0,
                "birkhoff": float((birkhoff_deviation(fam, points, pr, n, horizon, target)
                                   <= epsilon / 4).mean()) if len(pr) else 0.0,
                "probe": int(len(pr))}
    res = OmegaResult(cand[keep], ret[keep], ks, rejected, frac)
    if not len(res.indices):
        dom = max(rejected, key=rejected.get)
        raise EmptySelectionError(f"Omega filter empty; dominant rejection: {dom} {rejected}")
    return res


# ---------------------------------------------------------------------------
# symbol selection


@dataclass
class SymbolSelection:
    m: int
    cell: int
    members: np.ndarray  # indices into the orbit sample
    counts: dict  # m -> #F_m
    cell_counts: dict  # m -> #(F_m ∩ P) for the chosen cell
    bracket: tuple
    trimmed: int


def select_symbols(E, returns, ks, keys, n, epsilon, h_mu=None, max_symbols=None, rng=None):
    """Return time m maximizing #F_m, then the most populated cell of F_m.

    ``E`` are orbit indices, ``returns[i, j]`` says f^{ks[j]}(E_i) lands in the
    cell of E_i. With h_mu given the selection is trimmed to the upper bracket
    e^{(h+3 eps) n}; ``max_symbols`` is an additional cap.
    """
    E = np.asarray(E)
    if not len(E) or not np.any(returns):
        raise EmptySelectionError("no recurrences recorded")
    counts = {int(k): int(returns[:, j].sum()) for j, k in enumerate(ks)}
    j = max(range(len(ks)), key=lambda q: (returns[:, q].sum(), -q))
    m = int(ks[j])
    F = E[returns[:, j]]
    cells, inv, cnt = np.unique(keys[F], return_inverse=True, return_counts=True)
    c = int(np.argmax(cnt))
    members = F[inv == c]
    lo = hi = None
    trimmed = 0
    if h_mu is not None:
        lo, hi = math.exp((h_mu - 3 * epsilon) * n), math.exp((h_mu + 3 * epsilon) * n)
    cap = min(x for x in (hi, max_symbols, np.inf) if x is not None)
    if len(members) > cap:
        rng = rng or np.random.default_rng(0)
        keep = np.sort(rng.choice(len(members), size=int(cap), replace=False))
        trimmed = len(members) - len(keep)
        members = members[keep]
    return SymbolSelection(m, int(cells[c]), members, counts, {m: int(cnt[c])}, (lo, hi), trimmed)


# ---------------------------------------------------------------------------
# coding


def _alphabet_orbits(fmap, alphabet, m):
    A = np.atleast_2d(np.asarray(alphabet, dtype=float))
    out = np.empty((len(A), m, A.shape[1]))
    x = wrap(A)
    for k in range(m):
        out[:, k] = x
        x = fmap.forward(x)
    return out


def code_words(fmap: DiscreteMap, alphabet, words, m, tol=1e-13, orbits=None):
    """Periodic shadowing points of periodicized words, solved in one sparse system.

    Returns (points, cycles, residual); cycles[w] has shape (len(word) * m, d)
    and starts at the shadow of the first symbol.
    """
    words = [tuple(int(a) for a in w) for w in words]
    if not words or any(len(w) == 0 for w in words):
        raise ValueError("words must be nonempty")
    orb = _alphabet_orbits(fmap, alphabet, m) if orbits is None else orbits
    seeds, nxt, starts = [], [], []
    off = 0
    for w in words:
        seg = orb[list(w)].reshape(-1, orb.shape[-1])
        Lw = len(seg)
        seeds.append(seg)
        nxt.append(off + (np.arange(Lw) + 1) % Lw)
        starts.append(off)
        off += Lw
    seed = np.concatenate(seeds)
    cyc, rn = periodic_newton(fmap, seed, tol=tol, nxt=np.concatenate(nxt))
    cycles = [cyc[s0: s0 + len(w) * m] for s0, w in zip(starts, words)]
    return np.array([c[0] for c in cycles]), cycles, rn


def code_word(fmap: DiscreteMap, alphabet, word, m, tol=1e-13):
    """Shadow point of one periodicized word."""
    pts, cycles, _ = code_words(fmap, alphabet, [word], m, tol=tol)
    return pts[0]


def shadow_errors(fmap, alphabet, words, cycles, m, orbits=None):
    """max_i d_m(x_{w_i}, f^{im} y) per word."""
    orb = _alphabet_orbits(fmap, alphabet, m) if orbits is None else orbits
    out = []
    for w, c in zip(words, cycles):
        seg = orb[list(w)].reshape(-1, orb.shape[-1])
        out.append(float(_torus_norm(c - seg).max()))
    return np.array(out)


def injectivity_witness(words, cycles, m, n):
    """Min over word pairs of d_n between decoded orbits at the first differing position.

    Words are compared on a common period (lcm of lengths).
    """
    words = [tuple(w) for w in words]
    best = np.inf
    worst_pair = None
    by_len = {}
    for i, w in enumerate(words):
        by_len.setdefault(len(w), []).append(i)
    idx = list(range(len(words)))
    for a_pos, a in enumerate(idx):
        wa = words[a]
        for b in idx[a_pos + 1:]:
            wb = words[b]
            L = math.lcm(len(wa), len(wb))
            ea = [wa[i % len(wa)] for i in range(L)]
            eb = [wb[i % len(wb)] for i in range(L)]
            diff = [i for i in range(L) if ea[i] != eb[i]]
            if not diff:
                continue
            i0 = diff[0]
            ca, cb = cycles[a], cycles[b]
            ra = np.array([ca[(i0 * m + k) % len(ca)] for k in range(n)])
            rb = np.array([cb[(i0 * m + k) % len(cb)] for k in range(n)])
            d = float(_torus_norm(ra - rb).max())
            if d < best:
                best, worst_pair = d, (a, b)
    return best, worst_pair


def _injectivity_vectorized(words, cycles, m, n):
    """Same quantity for equal-length words, vectorized over pairs."""
    W = np.array(words)
    C = np.array(cycles)
    Lm = C.shape[1]
    best = np.inf
    pair = None
    for a in range(len(W) - 1):
        diff = W[a + 1:] != W[a]
        has = diff.any(axis=1)
        if not has.any():
            continue
        i0 = np.argmax(diff, axis=1)
        bs = np.arange(a + 1, len(W))[has]
        i0 = i0[has]
        pos = (i0[:, None] * m + np.arange(n)[None, :]) % Lm
        d = _torus_norm(C[bs[:, None], pos] - C[a][pos]).max(axis=1)
        k = int(np.argmin(d))
        if d[k] < best:
            best, pair = float(d[k]), (a, int(bs[k]))
    return best, pair


# ---------------------------------------------------------------------------
# model and audits


@dataclass
class HorseshoeModel:
    alphabet: np.ndarray
    alphabet_index: np.ndarray  # positions in the orbit sample
    m: int
    n: int
    epsilon: float
    rho: float
    delta: float
    shadow_bound: float
    partition: Partition
    cell: int
    words: list = field(default_factory=list)
    coded_points: np.ndarray = None
    cycles: list = field(default_factory=list)
    audits: dict = field(default_factory=dict)
    constraints: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def entropy_estimate(self):
        return math.log(len(self.alphabet)) / self.m

    def cloud(self):
        """Points of K_eps found so far: every point of every decoded cycle."""
        if not self.cycles:
            return np.zeros((0, self.alphabet.shape[1]))
        return np.concatenate(self.cycles) % 1.0

    def to_dict(self):
        return {
            "alphabet_size": int(len(self.alphabet)),
            "m": self.m,
            "n": self.n,
            "epsilon": self.epsilon,
            "rho": self.rho,
            "delta": self.delta,
            "shadow_bound": self.shadow_bound,
            "entropy_estimate": self.entropy_estimate,
            "partition": self.partition.to_dict(),
            "cell": int(self.cell),
            "n_words": len(self.words),
            "audits": self.audits,
            "constraints": self.constraints,
            "diagnostics": self.diagnostics,
        }


def hausdorff(a, b):
    ta, tb = cKDTree(np.asarray(a) % 1.0, boxsize=1.0), cKDTree(np.asarray(b) % 1.0, boxsize=1.0)
    return float(max(ta.query(np.asarray(b) % 1.0)[0].max(), tb.query(np.asarray(a) % 1.0)[0].max()))


def restricted_logs(fmap, s: Splitting, x, m):
    """(log co-norm on E, log norm on F) of Df^m at each row of x, for one-dimensional ends."""
    x = wrap(np.atleast_2d(np.asarray(x, dtype=float)))
    logE = np.zeros(len(x))
    logF = np.zeros(len(x))
    for _ in range(m):
        fr = s.frames(x)
        J = fmap.derivative(x)
        E, F = fr[0], fr[-1]
        JE, JF = J @ E, J @ F
        logE += np.log(np.linalg.svd(JE, compute_uv=False)[..., -1])
        logF += np.log(np.linalg.svd(JF, compute_uv=False)[..., 0])
        x = fmap.forward(x)
    return logE, logF


def item4_bounds(fmap, s, alphabet, m, exponents, epsilon):
    """Margins of log m(Df^m|E) - (chi_E - eps) m and (chi_F + eps) m - log |Df^m|F| per point."""
    logE, logF = restricted_logs(fmap, s, alphabet, m)
    chiE, chiF = exponents
    return logE - (chiE - epsilon) * m, (chiF + epsilon) * m - logF


def horseshoe_audit(model: HorseshoeModel, fmap, s, support, mu_integrals, h_mu, exponents,
                    md: MeasureDistance = None, nu_cycle=None):
    """Entropy gap, Hausdorff distance, measure distance and hyperbolicity margins; pass flags use the model epsilon."""
    eps = model.epsilon
    md = md or MeasureDistance()
    out = {}
    gap = abs(model.entropy_estimate - h_mu)
    out["item1"] = {"entropy_estimate": model.entropy_estimate, "h_mu": h_mu, "gap": gap, "pass": bool(gap < eps)}
    cloud = model.cloud()
    if len(cloud):
        dH = hausdorff(cloud, support)
        out["item2"] = {"hausdorff": dH, "cloud_points": int(len(cloud)), "pass": bool(dH < eps)}
    else:
        out["item2"] = {"hausdorff": None, "pass": False}
    if nu_cycle is None and model.cycles:
        nu_cycle = max(model.cycles, key=len)
    if nu_cycle is not None:
        nu = md.integrals(nu_cycle)
        D = md.upper(mu_integrals, nu)
        out["item3"] = {"D_truncated": md.value(mu_integrals, nu), "D_upper": D, "period": int(len(nu_cycle)),
                        "pass": bool(D < eps)}
    mE, mF = item4_bounds(fmap, s, model.alphabet, model.m, exponents, eps)
    out["item4"] = {"min_margin_E": float(mE.min()), "min_margin_F": float(mF.min()),
                    "pass": bool(mE.min() >= 0 and mF.min() >= 0)}
    return out


def lefschetz_count(A, n):
    """|det(A^n - I)| in exact integer arithmetic."""
    A = [[int(round(v)) for v in row] for row in np.asarray(A)]
    d = len(A)

    def mul(X, Y):
        return [[sum(X[i][k] * Y[k][j] for k in range(d)) for j in range(d)] for i in range(d)]

    P = [[int(i == j) for j in range(d)] for i in range(d)]
    B, e = A, n
    while e:
        if e & 1:
            P = mul(P, B)
        B = mul(B, B)
        e >>= 1
    M = [[P[i][j] - int(i == j) for j in range(d)] for i in range(d)]
    if d == 1:
        return abs(M[0][0])
    if d == 2:
        return abs(M[0][0] * M[1][1] - M[0][1] * M[1][0])
    from fractions import Fraction
    M = [[Fraction(v) for v in row] for row in M]
    det = Fraction(1)
    for c in range(d):
        p = next((r for r in range(c, d) if M[r][c] != 0), None)
        if p is None:
            return 0
        if p != c:
            M[c], M[p] = M[p], M[c]
            det = -det
        det *= M[c][c]
        for r in range(c + 1, d):
            f = M[r][c] / M[c][c]
            M[r] = [a - f * b for a, b in zip(M[r], M[c])]
    return abs(int(det))


def distinct_points(points, tol=1e-8):
    """Number of distinct torus points up to tol."""
    P = np.asarray(points) % 1.0
    if len(P) < 2:
        return len(P)
    pairs = cKDTree(P, boxsize=1.0).query_pairs(tol, output_type="ndarray")
    parent = np.arange(len(P))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in pairs.tolist():
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    return len({find(i) for i in range(len(P))})


def distinct_cycles(cycles, m, tol=1e-8):
    """Number of distinct periodic points among cycle starts, compared along the whole orbit.

    Starts of words that differ only far from position 0 agree to rounding
    error, so points are told apart by their orbits at every multiple of m.
    """
    X = np.array([np.asarray(c)[::m] for c in cycles]) % 1.0
    X = X.reshape(len(X), -1)
    if len(X) < 2:
        return len(X)
    pairs = cKDTree(X, boxsize=1.0).query_pairs(tol, p=np.inf, output_type="ndarray")
    parent = np.arange(len(X))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in pairs.tolist():
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    return len({find(i) for i in range(len(X))})


@dataclass
class PeriodicGrowth:
    m: int
    symbols: int
    lengths: list
    counts: list
    rates: list
    lefschetz: list
    hyperbolic: list

    def to_dict(self):
        return {"m": self.m, "symbols": self.symbols, "lengths": self.lengths, "counts": self.counts,
                "rates": self.rates, "lefschetz": self.lefschetz, "hyperbolic": self.hyperbolic}


def periodic_growth(fmap: DiscreteMap, s: Splitting, alphabet, m, lengths=(1, 2, 3, 4, 5, 6), tol=1e-8,
                    max_words=5000):
    """Distinct periodic points from all words of each length, with (1/(Lm)) log count."""
    A = np.atleast_2d(alphabet)
    orb = _alphabet_orbits(fmap, A, m)
    lin = fmap.linear_part() if isinstance(fmap, TorusMap) else None
    counts, rates, lef, hyp = [], [], [], []
    for L in lengths:
        words = list(itertools.product(range(len(A)), repeat=L))
        if len(words) > max_words:
            raise ValueError(f"{len(words)} words of length {L} exceed max_words")
        pts, cycles, rn = code_words(fmap, A, words, m, orbits=orb)
        # every decoded point must be hyperbolic over its period
        allc = np.concatenate(cycles)
        lE, lF = restricted_logs(fmap, s, allc, 1)
        per = len(cycles[0])
        sE = lE.reshape(len(cycles), per).sum(1)
        sF = lF.reshape(len(cycles), per).sum(1)
        hyp.append(bool(np.all(sE > 0) and np.all(sF < 0)))
        c = distinct_cycles(cycles, m, tol)
        counts.append(int(c))
        rates.append(math.log(c) / (L * m) if c > 0 else float("-inf"))
        lef.append(lefschetz_count(lin, L * m) if lin is not None else None)
    return PeriodicGrowth(m, len(A), list(lengths), counts, rates, lef, hyp)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class HorseshoeConfig:
    n: int = 12
    epsilon: float = 0.3
    t: float = 1.0
    n_mu: int = 10_000_000
    burn_in: int = 1000
    support_size: int = 1_000_000
    x0: tuple = (0.1234, 0.5678)
    omega_mode: str = "collective"
    cell_fraction: float = 0.99  # shadow bound as a fraction of eps/2
    max_symbols: int = None
    n_words: int = 400
    word_length: int = 2
    nu_word_length: int = 64
    J: int = 20
    seed: int = 0
    block_level: float = 1.0  # None disables the block restriction
    window: int = 200


def proof_constraints(n, epsilon, t, n_cells, shadow_bound, N_hat, J):
    """Each requirement on n and rho from the construction, with its value and status."""
    rows = {
        "n > log(l)/eps": (n, math.log(max(n_cells, 1)) / epsilon),
        "n > 2 log(t)/eps": (n, 2 * math.log(t) / epsilon),
        "n > 1/(6 eps)": (n, 1 / (6 * epsilon)),
        "n >= N_hat": (n, N_hat),
        "(n eps + 1) < e^{eps n}": (n * epsilon + 1, math.exp(epsilon * n)),
        "C rho < eps/2": (shadow_bound, epsilon / 2),
        "2^{-J} < eps/8": (2.0 ** -J, epsilon / 8),
    }
    out = {}
    for k, (a, b) in rows.items():
        if k.startswith("n >=") or k.startswith("n >"):
            ok = a > b if ">" in k and ">=" not in k else a >= b
        else:
            ok = a < b
        out[k] = {"value": float(a), "bound": float(b), "ok": bool(ok)}
    return out


def _block_mask(fmap, s, points, exponents, epsilon, t, window):
    seg = OrbitSegment(fmap, points, fmap.derivative(points[:-1]))
    # blocks at eps/2 as in the construction, kept below the smallness threshold
    eps = min(epsilon / 2, 0.5 * epsilon_zero(exponents))
    prof = resonance_sequences(seg, s, exponents, eps, window=window)
    mask = np.zeros(len(points), dtype=bool)
    mask[resonance_times(prof, t).times] = True
    return mask


def build_horseshoe(fmap: DiscreteMap, s: Splitting, cfg: HorseshoeConfig = None, exponents=None,
                    block_mask=None, N_hat=1):
    """Run the construction end to end and audit it."""
    cfg = cfg or HorseshoeConfig()
    n, eps = cfg.n, cfg.epsilon
    kmax = int(math.floor((1 + eps) * n))
    horizon = 10 * n
    tail = max(kmax, horizon) + 1
    P = fmap.orbit_points(np.asarray(cfg.x0, dtype=float), cfg.n_mu + cfg.burn_in + tail)[cfg.burn_in:]
    L = cfg.n_mu
    if exponents is None:
        est = lyapunov_estimate(fmap, s, P[0], 100_000)
        exponents = (float(est.chi_minus[0]), float(est.chi_plus[-1]))
    chiE, chiF = exponents
    h_mu = chiE  # Pesin: the one positive exponent
    step = max(1, L // cfg.support_size)
    support = P[:L:step] % 1.0
    md = MeasureDistance(cfg.J)
    mu_int = md.integrals(P[:L])

    # cells: F side fixed by the shadow bound, E side stretched by the expansion
    tail_factor = 2 * math.exp(-min(chiE, -chiF) * n)
    a_F = cfg.cell_fraction * (eps / 2) / (1 + tail_factor)
    part = adapted_partition(s, P[0], a_F, math.exp(chiE))
    keys = part.keys(P)
    rho = part.diameter
    Cr = shadow_scale(part, chiE, tail_factor)
    delta = 2 * Cr

    cand = np.arange(L)
    block_note = "none"
    if block_mask is None and cfg.block_level is not None:
        if isinstance(fmap, TorusMap) and not fmap.terms:
            block_note = "constant cocycle: every time is a resonance time"
        else:
            block_mask = _block_mask(fmap, s, P[: L + 1], exponents, eps, cfg.block_level, cfg.window)
            block_note = f"H_t at t={cfg.block_level}"
    if block_mask is not None:
        cand = cand[np.asarray(block_mask)[:L]]
        if not len(cand):
            raise EmptySelectionError("empty block cloud")
    om = omega_filter(P, cand, keys, n, eps, support[:: max(1, len(support) // 4000)], md.family,
                      mu_int, mode=cfg.omega_mode, horizon=horizon, seed=cfg.seed)

    # maximal (n, delta)-separated subsets, cell by cell
    rate = min(chiE, -chiF)
    pre = delta * math.exp(-rate * (n - 1) / 2) * 4
    okeys = keys[om.indices]
    order = np.argsort(okeys, kind="stable")
    bounds = np.flatnonzero(np.diff(okeys[order])) + 1
    keepE = []
    first_return = np.argmax(om.returns, axis=1)
    for grp in np.split(order, bounds):
        W = orbit_windows(P, om.indices[grp], n)
        # greedy order: earliest return first, then orbit time
        pri = np.lexsort((om.indices[grp], first_return[grp]))
        keepE.append(grp[separated_set(W, delta, prefilter=pre, order=pri)])
    keepE = np.sort(np.concatenate(keepE))
    E = om.indices[keepE]
    sel = select_symbols(E, om.returns[keepE], om.ks, keys, n, eps, h_mu=h_mu, max_symbols=cfg.max_symbols,
                         rng=np.random.default_rng(cfg.seed))
    alphabet = P[sel.members] % 1.0
    m = sel.m
    model = HorseshoeModel(alphabet, sel.members, m, n, eps, rho, delta, Cr, part, sel.cell)

    # exhaustive separation check on the alphabet
    W = orbit_windows(P, sel.members, n)
    sep = min_pairwise_dn(W, stop_below=delta)

    # single symbols plus random pairs; the long word feeds the measure check
    rng = np.random.default_rng(cfg.seed + 1)
    A = len(alphabet)
    singles = [(int(a),) for a in rng.choice(A, size=min(A, cfg.n_words // 2), replace=False)]
    pairs = [tuple(int(v) for v in rng.integers(0, A, cfg.word_length)) for _ in range(cfg.n_words - len(singles))]
    pairs = [w for w in pairs if len(set(w)) > 1]
    orb = _alphabet_orbits(fmap, alphabet, m)
    words = singles + pairs
    pts1, cyc1, rn1 = code_words(fmap, alphabet, singles, m, orbits=orb)
    pts2, cyc2, rn2 = code_words(fmap, alphabet, pairs, m, orbits=orb) if pairs else (np.zeros((0, 2)), [], 0.0)
    long_word = tuple(int(v) for v in rng.integers(0, A, cfg.nu_word_length))
    _, cyc3, rn3 = code_words(fmap, alphabet, [long_word], m, orbits=orb)
    model.words = words
    model.coded_points = np.concatenate([pts1, pts2])
    model.cycles = list(cyc1) + list(cyc2)
    errs = np.concatenate([shadow_errors(fmap, alphabet, singles, cyc1, m, orb),
                           shadow_errors(fmap, alphabet, pairs, cyc2, m, orb) if pairs else np.zeros(0)])
    inj1 = _injectivity_vectorized(singles, cyc1, m, n)[0]
    inj2 = _injectivity_vectorized(pairs, cyc2, m, n)[0] if len(pairs) > 1 else np.inf
    inj = min(inj1, inj2)

    model.audits = horseshoe_audit(model, fmap, s, support, mu_int, h_mu, exponents, md, nu_cycle=cyc3[0])
    model.audits["separation"] = {"min_dn": sep, "delta": delta, "pass": bool(sep >= delta)}
    model.audits["coding"] = {"max_shadow_error": float(errs.max()), "shadow_bound": Cr,
                              "residual": float(max(rn1, rn2, rn3)),
                              "injectivity_min_dn": float(inj), "pass": bool(inj > 0 and errs.max() <= Cr)}
    model.audits["collective_omega"] = {
        "density_radius": density_radius(np.concatenate([P[sel.members + k] for k in range(1, n + 1)]),
                                          support[:: max(1, len(support) // 20000)]),
        "birkhoff": float(np.max(np.abs(md.integrals(np.concatenate([P[sel.members + k] for k in range(n)]))
                                        - mu_int))),
    }
    model.constraints = proof_constraints(n, eps, cfg.t, part.count(P[:L]), Cr, N_hat, cfg.J)
    model.diagnostics = {"omega": len(om.indices), "E": int(len(E)), "counts_by_m": sel.counts,
                         "cell_counts": sel.cell_counts, "bracket": sel.bracket, "trimmed": sel.trimmed,
                         "rejected": om.rejected, "blocks": block_note, "pointwise_pass": om.pointwise, "h_mu": h_mu,
                         "exponents": list(exponents)}
    return model
