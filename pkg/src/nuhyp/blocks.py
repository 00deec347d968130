"""Resonance sequences, resonance time sets, block point clouds and the level function."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import accumulate

import numpy as np
from scipy.spatial import cKDTree

from .cocycle import CocycleStats, lyapunov_estimate, orbit
from .systems import DiscreteMap, Splitting

DEFAULT_LEVELS = (1, 2, 4, 8, 16, 32)
DEFAULT_WINDOW = 500


class EmptyBlockError(ValueError):
    pass


class CoverageError(ValueError):
    pass


@dataclass
class Constraint:
    """One exponential bound along the orbit.

    ``values`` are per-step log norms (kind "upper") or log co-norms (kind
    "lower"); ``rate`` is the per-step log rate the values are compared with.
    """

    bundle: int
    kind: str
    values: np.ndarray
    rate: float

    def ratios(self):
        """Per-step log ratios whose partial sums enter the resonance sequences."""
        if self.kind == "upper":
            return self.values - self.rate
        return self.rate - self.values


def epsilon_zero(exponents):
    """Smallness threshold min(|chi_i|/10, |chi_{i+1} - chi_i|/10) over sorted exponents."""
    chi = sorted((float(c) for c in exponents), reverse=True)
    cands = [abs(c) / 10 for c in chi] + [abs(b - a) / 10 for a, b in zip(chi, chi[1:])]
    return min(cands)


def default_epsilon(exponents):
    return epsilon_zero(exponents) / 2


def two_bundle_constraints(stats: CocycleStats, exponents, epsilon, N=1, e_bundle=0, f_bundle=None):
    """E (lower, rate N(chi_E^- - eps)) and F (upper, rate N(chi_F^+ + eps)) constraints.

    ``exponents`` = (chi_E^-, chi_F^+) for f; values are N-step restricted norms.
    """
    if f_bundle is None:
        f_bundle = len(stats.dims) - 1
    chiE, chiF = exponents
    _, conE = stats.power_series(e_bundle, N)
    normF, _ = stats.power_series(f_bundle, N)
    return [
        Constraint(f_bundle, "upper", normF, N * (chiF + epsilon)),
        Constraint(e_bundle, "lower", conE, N * (chiE - epsilon)),
    ]


def multi_bundle_constraints(stats: CocycleStats, exponents, epsilon, N=1):
    """Both-sided constraints on every bundle, exponents listed per bundle."""
    out = []
    for j, chi in enumerate(exponents):
        norm, conorm = stats.power_series(j, N)
        out.append(Constraint(j, "upper", norm, N * (chi + epsilon)))
        out.append(Constraint(j, "lower", conorm, N * (chi - epsilon)))
    return out


def _lindley_forward(b):
    # A_0 = 0, A_{n+1} = max(0, A_n + b_n)
    out = np.empty(len(b) + 1)
    out[0] = 0.0
    out[1:] = list(accumulate(b.tolist(), lambda a, x: max(0.0, a + x), initial=0.0))[1:]
    return out


def _lindley_backward(b):
    # A_L = 0, A_n = max(0, b_n + A_{n+1})
    rev = list(accumulate(b[::-1].tolist(), lambda a, x: max(0.0, a + x), initial=0.0))
    return np.array(rev[::-1])


def _windowed_sup(b, W):
    """max_{0<=j<=W} sum_{i=n}^{n+j-1} b_i for n = 0..L-W."""
    S = np.concatenate([[0.0], np.cumsum(b)])
    L = len(b)
    if W == 0:
        return np.zeros(L + 1)
    return _forward_max(S, W + 1) - S[: L - W + 1]


def _forward_max(S, w):
    """out[i] = max(S[i:i+w]) for i = 0..len(S)-w, via doubling."""
    m = len(S) - w + 1
    M = S.copy()
    span = 1
    while 2 * span <= w:
        M = np.maximum(M[:-span], M[span:])
        span *= 2
    # M[i] = max(S[i:i+span]); cover the rest with one overlapping window
    return np.maximum(M[:m], M[w - span: w - span + m])


@dataclass
class ResonanceProfile:
    epsilon: float
    exponents: tuple
    N: int
    window: int
    points: np.ndarray  # g-orbit points x_0 .. x_L
    log_a1: np.ndarray  # length L+1
    log_a2: np.ndarray  # windowed, length L-W+1
    log_a2_tail: np.ndarray  # untruncated within the data, length L+1
    log_c0: float
    constraints: list = field(repr=False)
    windowed: bool = True

    @property
    def length(self):
        return len(self.points) - 1

    @property
    def n_computed(self):
        """Number of indices where both sequences are available."""
        return len(self.log_a2)

    def level(self):
        """max(log a1, log a2) over computed indices."""
        return np.maximum(self.log_a1[: self.n_computed], self.log_a2)

    def window_sensitivity(self):
        """Largest change in log a2 when the window is halved (where both exist)."""
        half = self.window // 2
        a2h = np.max([_windowed_sup(c.ratios(), half) for c in self.constraints], axis=0)
        m = self.n_computed
        return float(np.max(self.log_a2 - a2h[:m], initial=0.0))

    def summary(self, levels=DEFAULT_LEVELS):
        out = {"epsilon": self.epsilon, "N": self.N, "window": self.window, "windowed": self.windowed,
               "log_c0": self.log_c0, "length": self.length, "n_computed": self.n_computed, "levels": {}}
        for t in levels:
            ts = resonance_times(self, t)
            out["levels"][str(t)] = {"count": len(ts.times), "density": ts.density,
                                     "density_bounds": list(ts.densities)}
        return out

    def to_csv(self, path, levels=DEFAULT_LEVELS):
        lev = self.level()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "log_a1", "log_a2"] + [f"in_H_{t}" for t in levels])
            for n in range(self.n_computed):
                w.writerow([n, repr(float(self.log_a1[n])), repr(float(self.log_a2[n]))]
                           + [int(lev[n] <= np.log(t) + 1e-12) for t in levels])


def profile_from_constraints(constraints, points, epsilon, exponents, N, window):
    L = len(constraints[0].values)
    if window > L:
        raise ValueError(f"window {window} longer than orbit ({L} steps)")
    bs = [c.ratios() for c in constraints]
    a1 = np.max([_lindley_forward(b) for b in bs], axis=0)
    a2 = np.max([_windowed_sup(b, window) for b in bs], axis=0)
    tail = np.max([_lindley_backward(b) for b in bs], axis=0)
    log_c0 = max(0.0, max(float(np.max(np.abs(b), initial=0.0)) for b in bs))
    return ResonanceProfile(epsilon, tuple(exponents), N, window, points[: L + 1], a1, a2, tail,
                            log_c0, constraints)


def resonance_sequences(seg, s: Splitting, exponents, epsilon, window=DEFAULT_WINDOW, N=1,
                        stats: CocycleStats | None = None) -> ResonanceProfile:
    """Two-bundle resonance sequences for g = f^N along an f-orbit segment.

    exponents = (chi_E^-, chi_F^+) of f; epsilon is the f-level tolerance.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if stats is None:
        stats = CocycleStats(seg, s)
    cons = two_bundle_constraints(stats, exponents, epsilon, N)
    return profile_from_constraints(cons, stats.seg.points[::N], epsilon, exponents, N, window)


@dataclass
class ResonanceTimeSet:
    t: float
    times: np.ndarray
    densities: tuple  # (lower, upper) over prefixes of length >= M/2
    n_computed: int

    @property
    def density(self):
        return len(self.times) / self.n_computed if self.n_computed else 0.0


def resonance_times(profile: ResonanceProfile, t) -> ResonanceTimeSet:
    if t < 1:
        raise ValueError("level t must be >= 1")
    lev = profile.level()
    member = lev <= np.log(t) + 1e-12
    times = np.flatnonzero(member)
    M = len(member)
    if M == 0:
        return ResonanceTimeSet(t, times, (0.0, 0.0), 0)
    frac = np.cumsum(member) / np.arange(1, M + 1)
    tail = frac[max(0, M // 2 - 1):]
    return ResonanceTimeSet(t, times, (float(tail.min()), float(tail.max())), M)


def covering_radius(points) -> float:
    """Largest nearest-neighbour distance within the cloud (0 for a single point)."""
    pts = np.asarray(points)
    if len(pts) < 2:
        return 0.0
    tree = cKDTree(np.mod(pts, 1.0), boxsize=1.0)
    d, _ = tree.query(np.mod(pts, 1.0), k=2)
    return float(d[:, 1].max())


@dataclass
class BlockApproximation:
    t: float
    tail_start: int
    indices: np.ndarray
    points: np.ndarray
    mesh: float

    def tree(self):
        return cKDTree(np.mod(self.points, 1.0), boxsize=1.0)


def block_points(profile: ResonanceProfile, times: ResonanceTimeSet, tail_start=0) -> BlockApproximation:
    if tail_start >= profile.length:
        raise ValueError("tail_start beyond orbit")
    idx = times.times[times.times >= tail_start]
    if len(idx) == 0:
        raise EmptyBlockError(f"empty H_t tail (t={times.t}, tail_start={tail_start})")
    pts = profile.points[idx]
    return BlockApproximation(times.t, int(tail_start), idx, pts, covering_radius(pts))


@dataclass
class LevelFunction:
    indices: np.ndarray
    values: np.ndarray  # T estimates (grid values), nan where uncovered
    levels: tuple
    mesh: float
    method: str = "min level whose H_t contains a time within mesh of the point"

    def __getitem__(self, k):
        pos = np.searchsorted(self.indices, k)
        if pos >= len(self.indices) or self.indices[pos] != k:
            raise KeyError(k)
        return self.values[pos]


def level_estimates(profile: ResonanceProfile, query_indices=None, levels=DEFAULT_LEVELS, mesh=None,
                    tail_start=0, strict=True) -> LevelFunction:
    """T at sampled g-orbit points: the smallest grid level whose block cloud comes within mesh."""
    levels = tuple(sorted(levels))
    if query_indices is None:
        query_indices = np.arange(profile.length + 1)
    query_indices = np.asarray(query_indices)
    q = np.mod(profile.points[query_indices], 1.0)
    clouds = []
    for t in levels:
        try:
            clouds.append(block_points(profile, resonance_times(profile, t), tail_start))
        except EmptyBlockError:
            clouds.append(None)
    if mesh is None:
        top = next((c for c in reversed(clouds) if c is not None), None)
        if top is None:
            raise CoverageError("no level on the grid has a nonempty block")
        mesh = max(top.mesh, 1e-12)
    T = np.full(len(q), np.nan)
    for t, cloud in zip(levels, clouds):
        if cloud is None:
            continue
        todo = np.isnan(T)
        if not todo.any():
            break
        d, _ = cloud.tree().query(q[todo], distance_upper_bound=mesh * (1 + 1e-9))
        hit = np.isfinite(d)
        sub = np.flatnonzero(todo)[hit]
        T[sub] = t
    if strict and np.isnan(T).any():
        k = int(query_indices[np.flatnonzero(np.isnan(T))[0]])
        raise CoverageError(f"orbit point {k} not covered at any level of {levels}")
    return LevelFunction(query_indices, T, levels, float(mesh))


@dataclass
class TemperedAudit:
    ks: np.ndarray
    sequence: np.ndarray  # log T(g^k x0) / k
    tail_max_half: float  # max over k in [n/2, n]
    tail_max_quarter: float  # max over k in [n/4, n/2]
    bound: float
    uncovered: int

    @property
    def decay_pass(self):
        return self.tail_max_half <= self.tail_max_quarter + 1e-15

    @property
    def passed(self):
        return self.decay_pass and self.tail_max_half <= self.bound


def tempered_audit(level_fn: LevelFunction, n=None, bound=0.05) -> TemperedAudit:
    """Audit (1/k) log T(g^k x0) along the orbit; uncovered points are skipped and counted."""
    ks = level_fn.indices
    keep = ks >= 1
    ks = ks[keep]
    T = level_fn.values[keep]
    if n is None:
        n = int(ks.max())
    seq = np.log(T) / ks
    valid = np.isfinite(seq)

    def tail_max(lo, hi):
        m = valid & (ks >= lo) & (ks <= hi)
        return float(np.max(seq[m], initial=0.0))

    return TemperedAudit(ks, seq, tail_max(n / 2, n), tail_max(n / 4, n / 2), bound, int((~valid).sum()))


@dataclass
class BlockBoundReport:
    indices: np.ndarray
    k: int
    residuals: np.ndarray  # (len(indices), n_constraints, 2): backward / forward
    labels: list

    @property
    def min_residual(self):
        return float(np.min(self.residuals, initial=np.inf))

    def passed(self, slack=1e-10):
        return self.min_residual >= -slack


def constraint_residuals(constraints, t, indices, k):
    """Log residuals of the product bounds over [j-k, j) and [j, j+k) at each index j.

    Lower constraints: sum of log co-norms - (k rate - log t).
    Upper constraints: (k rate + log t) - sum of log norms.
    """
    indices = np.asarray(indices, dtype=int)
    L = len(constraints[0].values)
    if np.any(indices < k):
        raise ValueError("insufficient backward orbit for the requested k")
    if np.any(indices + k > L):
        raise ValueError("insufficient forward orbit for the requested k")
    logt = np.log(t)
    res = np.empty((len(indices), len(constraints), 2))
    for c, con in enumerate(constraints):
        S = np.concatenate([[0.0], np.cumsum(con.values)])
        back = S[indices] - S[indices - k]
        fwd = S[indices + k] - S[indices]
        for side, tot in enumerate((back, fwd)):
            if con.kind == "lower":
                res[:, c, side] = tot - (k * con.rate - logt)
            else:
                res[:, c, side] = (k * con.rate + logt) - tot
    return res


def block_bound_check(profile: ResonanceProfile, t, block_indices, k) -> BlockBoundReport:
    res = constraint_residuals(profile.constraints, t, block_indices, k)
    labels = [f"{c.kind}[{c.bundle}]" for c in profile.constraints]
    return BlockBoundReport(np.asarray(block_indices), k, res, labels)


def growth_bound_violation(profile: ResonanceProfile) -> float:
    """max over n of log a_{n+1} - log a_n - log c0 for a1 and the untruncated a2 (should be <= 0)."""
    d1 = np.diff(profile.log_a1) - profile.log_c0
    d2 = np.diff(profile.log_a2_tail) - profile.log_c0
    return float(max(d1.max(initial=-np.inf), d2.max(initial=-np.inf)))


def estimate_exponents(fmap: DiscreteMap, s: Splitting, x0, n=100_000, stats=None):
    """(chi_E^-, chi_F^+) from a long orbit."""
    if stats is not None:
        n = stats.length
    est = lyapunov_estimate(fmap, s, x0, n, stats=stats)
    return float(est.chi_minus[0]), float(est.chi_plus[-1])


@dataclass
class PowerSelection:
    N: int
    density: float
    densities: dict
    monotone: bool


def select_power(fmap: DiscreteMap, s: Splitting, x0, epsilon, theta, candidates=(1, 2, 4, 8, 16),
                 n=100_000, window=200, exponents=None, stats=None) -> PowerSelection:
    """Smallest N whose f^N resonance set H_1 has density above theta along the orbit."""
    if not 0 <= theta < 1:
        raise ValueError("theta must lie in [0, 1)")
    if stats is None:
        stats = CocycleStats(orbit(fmap, x0, n), s)
    if exponents is None:
        exponents = estimate_exponents(fmap, s, x0, stats=stats)
    dens = {}
    chosen = None
    for N in sorted(candidates):
        L = stats.length // N
        W = min(window, L // 2)
        cons = two_bundle_constraints(stats, exponents, epsilon, N)
        prof = profile_from_constraints(cons, stats.seg.points[::N], epsilon, exponents, N, W)
        dens[N] = resonance_times(prof, 1.0).density
        if chosen is None and (dens[N] > theta or theta == 0):
            chosen = N
    vals = [dens[N] for N in sorted(dens)]
    mono = all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
    if chosen is None:
        raise ValueError(f"no candidate N reaches density {theta}: {dens}")
    return PowerSelection(chosen, dens[chosen], dens, mono)
