"""Multi-bundle resonance profiles with two-sided bounds; periodic orbits approximating the spectrum."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .blocks import (CocycleStats, ResonanceProfile, constraint_residuals, epsilon_zero,
                     multi_bundle_constraints, profile_from_constraints, resonance_times, two_bundle_constraints)
from .cocycle import lyapunov_estimate, orbit
from .manifolds import HypothesisError, chart_radius
from .shadowing import (SolverError, close_periodic, measure_c0, periodic_pseudo_orbit,
                        shadow_constants)
from .systems import DiscreteMap, Splitting, displacement, reverse, wrap


def multi_resonance(seg, s: Splitting, exponents, epsilon, N=1, window=200, stats=None) -> ResonanceProfile:
    """Resonance sequences with both-sided bounds on every bundle, combined by max.

    ``exponents`` lists one exponent per bundle of ``s``.
    """
    exponents = tuple(float(c) for c in exponents)
    if stats is None:
        stats = CocycleStats(seg, s)
    if len(exponents) != len(stats.dims):
        raise ValueError("one exponent per bundle is required")
    eps0 = epsilon_zero(exponents)
    if not 0 < epsilon < eps0:
        raise HypothesisError(f"epsilon={epsilon} not in (0, eps0={eps0:.6g})")
    L = stats.length // N
    window = min(window, L)
    cons = multi_bundle_constraints(stats, exponents, epsilon, N)
    return profile_from_constraints(cons, stats.seg.points[::N], epsilon, exponents, N, window)


def two_bundle_profile(stats: CocycleStats, exponents, epsilon, N=1, window=200) -> ResonanceProfile:
    """The E/F profile at the same parameters, for dominance comparisons."""
    cons = two_bundle_constraints(stats, (exponents[0], exponents[-1]), epsilon, N)
    return profile_from_constraints(cons, stats.seg.points[::N], epsilon, exponents, N,
                                    min(window, stats.length // N))


@dataclass
class LiaoPesinReport:
    indices: np.ndarray
    k: int
    N: int
    residuals: dict  # bundle -> array (len(indices), 4): upper back/fwd, lower back/fwd

    @property
    def min_residual(self):
        return float(min(np.min(r, initial=np.inf) for r in self.residuals.values()))

    def passed(self, slack=1e-10):
        return self.min_residual >= -slack


def liaopesin_check(profile: ResonanceProfile, t, indices, k) -> LiaoPesinReport:
    """Log residuals of the four product bounds per bundle over k steps of g = f^N on each side."""
    res = constraint_residuals(profile.constraints, t, indices, k)
    out = {}
    for c, con in enumerate(profile.constraints):
        cols = out.setdefault(con.bundle, np.zeros((len(res), 4)))
        off = 0 if con.kind == "upper" else 2
        cols[:, off: off + 2] = res[:, c, :]
    return LiaoPesinReport(np.asarray(indices), int(k), profile.N, out)


@dataclass
class Recurrences:
    start: np.ndarray
    lag: np.ndarray
    gap: np.ndarray

    def __len__(self):
        return len(self.start)


def find_recurrences(points, radius, lag_min=1, lag_max=None, mask=None) -> Recurrences:
    """Pairs i < j of orbit indices with d(x_i, x_j) < radius and lag j - i in range, by (lag, gap).

    ``mask`` restricts both ends to marked indices.
    """
    P = np.asarray(points) % 1.0
    pairs = cKDTree(P, boxsize=1.0).query_pairs(radius, output_type="ndarray")
    if not len(pairs):
        return Recurrences(np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    i, j = pairs.min(axis=1), pairs.max(axis=1)
    ok = (j - i) >= lag_min
    if lag_max is not None:
        ok &= (j - i) <= lag_max
    if mask is not None:
        mask = np.asarray(mask)
        ok &= mask[i] & mask[j]
    i, j = i[ok], j[ok]
    gap = np.linalg.norm(displacement(P[i], P[j]), axis=-1)
    order = np.lexsort((i, gap, j - i))
    return Recurrences(i[order], (j - i)[order], gap[order])


def bundle_period_logs(fmap: DiscreteMap, s: Splitting, cycle):
    """Log singular values of Df^{n0} restricted to each bundle along a cycle, per bundle.

    Each step is expressed between the bundle frames at consecutive cycle
    points, so no direction is pushed through the whole period.
    """
    cyc = np.asarray(cycle, dtype=float)
    J = fmap.derivative(cyc)
    out = []
    for F in s.frames(cyc):
        C = np.einsum("nji,njk,nkl->nil", np.roll(F, -1, axis=0), J, F)
        k = C.shape[-1]
        if k == 1:
            out.append(np.array([float(np.sum(np.log(np.abs(C[:, 0, 0]))))]))
            continue
        R = np.eye(k)
        scale = 0.0
        for M in C:
            R = M @ R
            c = np.max(np.abs(R))
            R /= c
            scale += math.log(c)
        out.append(np.sort(np.log(np.linalg.svd(R, compute_uv=False)) + scale)[::-1])
    return out


def periodic_exponents(fmap, s, cycle, backward=False):
    """Per-bundle exponents of a cycle; with ``backward`` they come from the inverse map and are negated."""
    cyc = np.asarray(cycle, dtype=float)
    n0 = len(cyc)
    if backward:
        g = reverse(fmap)
        # g-cycle: q_0, q_{n-1}, ..., q_1
        rc = np.concatenate([cyc[:1], cyc[:0:-1]])
        return [-v / n0 for v in bundle_period_logs(g, s, rc)]
    return [v / n0 for v in bundle_period_logs(fmap, s, cyc)]


@dataclass
class SpectrumMatch:
    mu_exponents: list  # descending, with repetition
    periodic_exponents: list
    multiplicities: list  # per distinct mu exponent, in the same order
    max_gap: float
    tolerance: float
    passed: bool
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {"mu_exponents": self.mu_exponents, "periodic_exponents": self.periodic_exponents,
                "multiplicities": self.multiplicities, "max_gap": self.max_gap, "tolerance": self.tolerance,
                "passed": self.passed, "details": self.details}


def match_spectra(mu_by_bundle, dims, per_by_bundle, tolerance):
    mu = sorted([float(c) for c, d in zip(mu_by_bundle, dims) for _ in range(d)], reverse=True)
    per = sorted([float(v) for arr in per_by_bundle for v in arr], reverse=True)
    if len(mu) != len(per):
        raise ValueError("spectra of different lengths")
    # multiplicities: runs of equal bundle exponents
    mult = []
    for c, d in sorted(zip(mu_by_bundle, dims), key=lambda q: -q[0]):
        if mult and abs(mult[-1][0] - c) < 1e-12:
            mult[-1][1] += d
        else:
            mult.append([float(c), int(d)])
    gap = float(max(abs(a - b) for a, b in zip(mu, per)))
    return SpectrumMatch(mu, per, [m for _, m in mult], gap, float(tolerance), bool(gap < tolerance))


@dataclass
class SpectrumBudget:
    n_orbit: int = 1_000_000
    n_exponents: int = 200_000
    window: int = 200
    lag_max: int = 6000
    attempts: int = 5


def approximate_spectrum_by_periodic(fmap: DiscreteMap, s: Splitting, x0, epsilon, budget: SpectrumBudget = None,
                                     t=1.0, exponents=None, seg=None, stats=None):
    """Close a block recurrence of the mu-orbit and compare its exponents with mu's.

    Returns (SpectrumMatch, PeriodicCertificate). ``s`` is the full splitting;
    its first and last bundles play the roles of E and F.
    """
    budget = budget or SpectrumBudget()
    details = {}
    if exponents is None:
        est = lyapunov_estimate(fmap, s, x0, budget.n_exponents)
        exponents = [float(c) for c in est.chi_plus]
        osc = est.oscillation
        for c, o in zip(exponents, osc):
            if abs(c) <= 10 * o:
                raise HypothesisError(f"exponent {c:.4g} not separated from 0 (oscillation {o:.3g})")
        details["oscillation"] = [float(o) for o in osc]
    exponents = [float(c) for c in exponents]
    details["mu_by_bundle"] = exponents
    if seg is None:
        seg = orbit(fmap, x0, budget.n_orbit)
    if stats is None:
        stats = CocycleStats(seg, s)
    prof = multi_resonance(seg, s, exponents, epsilon, window=budget.window, stats=stats)
    H = resonance_times(prof, t)
    mask = np.zeros(len(seg.points), dtype=bool)
    mask[H.times] = True
    details["block_density"] = H.density

    chiE, chiF = exponents[0], exponents[-1]
    sample = seg.points[: min(len(seg.points), 20_000): 200]
    r = chart_radius(fmap, s, sample, epsilon)
    C0 = measure_c0(s, seg.points[: min(len(seg.points), 20_000): 50])
    const = shadow_constants((chiE, chiF), epsilon, t, r, C0)
    radius = min(const.beta0, r / const.C1)
    lag_min = max(const.N2, int(math.floor(math.log(t) / epsilon)) + 1)
    rec = find_recurrences(seg.points, radius, lag_min, budget.lag_max, mask)
    details.update(constants=const.as_dict(), gap_bound=radius, lag_min=lag_min, recurrences=len(rec))
    if not len(rec):
        raise HypothesisError("no admissible block recurrence within budget")
    cert = None
    errors = []
    for q in range(min(budget.attempts, len(rec))):
        i, n0 = int(rec.start[q]), int(rec.lag[q])
        po = periodic_pseudo_orbit(seg.points[i], n0, K=1, fmap=fmap)
        try:
            cert = close_periodic(fmap, s, po, const)
        except (SolverError, HypothesisError) as exc:
            errors.append(f"start {i} lag {n0}: {exc}")
            continue
        details.update(start=i, lag=n0, gap=float(rec.gap[q]))
        break
    if cert is None:
        raise SolverError("no recurrence closed: " + "; ".join(errors))
    per = periodic_exponents(fmap, s, cert.cycle)
    match = match_spectra(exponents, s.dims, per, 3 * epsilon)
    match.details = details
    return match, cert


def pushed_restricted_logs(fmap: DiscreteMap, s: Splitting, points, m):
    """Per point and bundle: (log norm, log co-norm) of Df^m on the bundle, by pushing frames with QR."""
    x = wrap(np.atleast_2d(np.asarray(points, dtype=float)))
    frames = s.frames(x)
    out = []
    for F in frames:
        Q = np.array(F, dtype=float)
        k = Q.shape[-1]
        R = np.broadcast_to(np.eye(k), (len(x), k, k)).copy()
        scale = np.zeros(len(x))
        y = x.copy()
        for _ in range(m):
            Q, r = np.linalg.qr(fmap.derivative(y) @ Q)
            R = r @ R
            c = np.abs(R).max(axis=(1, 2))
            R /= c[:, None, None]
            scale += np.log(c)
            y = fmap.forward(y)
        sv = np.linalg.svd(R, compute_uv=False)
        out.append((np.log(sv[:, 0]) + scale, np.log(sv[:, -1]) + scale))
    return out


@dataclass
class SpectrumAudit:
    m: int
    epsilon: float
    margins_upper: np.ndarray  # (points, bundles): (chi_j + eps) m - log norm
    margins_lower: np.ndarray  # log co-norm - (chi_j - eps) m

    @property
    def pass_map(self):
        return (self.margins_upper >= -1e-10) & (self.margins_lower >= -1e-10)

    @property
    def passed(self):
        return bool(self.pass_map.all())

    def to_dict(self):
        return {"m": self.m, "epsilon": self.epsilon, "passed": self.passed,
                "min_margin_upper": self.margins_upper.min(axis=0).tolist(),
                "min_margin_lower": self.margins_lower.min(axis=0).tolist(),
                "failures": int((~self.pass_map).any(axis=1).sum())}


def horseshoe_spectrum_audit(model, fmap: DiscreteMap, s: Splitting, m, exponents, epsilon) -> SpectrumAudit:
    """Two-sided bounds e^{(chi_j - eps)m} <= |Df^m u| <= e^{(chi_j + eps)m} on each bundle at each symbol."""
    logs = pushed_restricted_logs(fmap, s, model.alphabet, m)
    up = np.stack([(c + epsilon) * m - ln for c, (ln, _) in zip(exponents, logs)], axis=1)
    lo = np.stack([lc - (c - epsilon) * m for c, (_, lc) in zip(exponents, logs)], axis=1)
    return SpectrumAudit(int(m), float(epsilon), up, lo)
