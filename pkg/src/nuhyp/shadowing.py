"""Pseudo-orbits, constructive and Newton shadowing, envelope checks, periodic closing, power lifting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .systems import DiscreteMap, PowerMap, Splitting, displacement, reverse, torus_distance, wrap
from .manifolds import (ChartError, ConvergenceError, HypothesisError, OrbitFrames, averf_hypotheses,
                        intersect_disks, pullback, pushforward, reanchor, straight_disk)


class PseudoOrbitError(ValueError):
    """Malformed or unbuildable pseudo-orbit."""


class PseudoOrbitParseError(PseudoOrbitError):
    def __init__(self, lineno, msg):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# pseudo-orbits

@dataclass
class PseudoOrbit:
    points: np.ndarray  # x_k for k = -K..K
    ns: np.ndarray
    beta: float
    block_level: float = 1.0
    periodic: bool = False

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.ns = np.asarray(self.ns, dtype=int)
        if len(self.points) != len(self.ns) or len(self.ns) % 2 == 0:
            raise PseudoOrbitError("need 2K+1 entries (k = -K..K)")
        if np.any(self.ns < 1):
            raise PseudoOrbitError("all n_k must be >= 1")

    @property
    def K(self):
        return len(self.ns) // 2

    @property
    def ks(self):
        return np.arange(-self.K, self.K + 1)

    def x(self, k):
        return self.points[k + self.K]

    def n(self, k):
        return int(self.ns[k + self.K])

    def s(self, k):
        """Time of x_k along the shadowing orbit: 0 at k=0, partial sums of n_k either side."""
        if k >= 0:
            return int(sum(self.n(i) for i in range(0, k)))
        return -int(sum(self.n(i) for i in range(k, 0)))

    def segments(self, fmap):
        return [fmap.orbit_points(self.points[i], int(self.ns[i])) for i in range(len(self.ns))]

    def jumps(self, fmap, segments=None):
        """d(f^{n_k} x_k, x_{k+1}) for k = -K..K-1."""
        segs = self.segments(fmap) if segments is None else segments
        return np.array([torus_distance(segs[i][-1], self.points[i + 1]) for i in range(len(segs) - 1)])

    def to_text(self):
        lines = [f"# beta = {float(self.beta)!r}", f"# level = {float(self.block_level)!r}",
                 f"# periodic = {int(self.periodic)}"]
        for k, p, n in zip(self.ks, self.points, self.ns):
            lines.append(f"{int(k)} {float(p[0])!r} {float(p[1])!r} {int(n)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, beta=None):
        meta = {}
        rows = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:]
                if "=" in body:
                    key, _, val = body.partition("=")
                    meta[key.strip()] = val.strip()
                continue
            parts = line.split()
            if len(parts) != 4:
                raise PseudoOrbitParseError(lineno, f"expected 'k x1 x2 n_k', got {len(parts)} fields")
            try:
                k = int(parts[0])
                x1, x2 = float(parts[1]), float(parts[2])
                n = int(parts[3])
            except ValueError as exc:
                raise PseudoOrbitParseError(lineno, str(exc)) from None
            if not (math.isfinite(x1) and math.isfinite(x2)):
                raise PseudoOrbitParseError(lineno, "non-finite coordinate")
            if n < 1:
                raise PseudoOrbitParseError(lineno, "n_k must be >= 1")
            if rows and k != rows[-1][0] + 1:
                raise PseudoOrbitParseError(lineno, "k must increase by one per line")
            rows.append((k, x1, x2, n, lineno))
        if not rows:
            raise PseudoOrbitParseError(0, "no entries")
        if rows[0][0] != -rows[-1][0]:
            raise PseudoOrbitParseError(rows[0][4], "k must run symmetrically from -K to K")
        pts = wrap(np.array([[r[1], r[2]] for r in rows]))
        ns = np.array([r[3] for r in rows])
        b = float(meta.get("beta", "nan")) if beta is None else beta
        return cls(pts, ns, b, float(meta.get("level", 1.0)), bool(int(meta.get("periodic", 0))))

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())


def build_pseudo_orbit(fmap: DiscreteMap, block, beta, n_spec, K, seed=0, mode="jitter"):
    """Chain of orbit segments starting from a seeded block point.

    mode "nearest": x_{k+1} is the block point nearest to f^{n_k}(x_k); fails when it is
    farther than beta. mode "jitter": x_{k+1} = f^{n_k}(x_k) + a random jump of size in
    [beta/2, beta], which must stay within the cloud's covering radius of a block point.
    beta = 0 in either mode gives a genuine orbit whenever the images are block points.
    """
    rng = np.random.default_rng(seed)
    ns = np.full(2 * K + 1, int(n_spec)) if np.isscalar(n_spec) else np.asarray(n_spec, dtype=int)
    if len(ns) != 2 * K + 1:
        raise PseudoOrbitError("n_spec must be a scalar or have 2K+1 entries")
    pts = np.asarray(block.points, dtype=float)
    if len(pts) == 0:
        raise PseudoOrbitError("empty block cloud")
    tree = cKDTree(wrap(pts) % 1.0, boxsize=1.0)
    mesh = max(block.mesh, beta)
    x = pts[rng.integers(len(pts))]
    out = [x]
    for i in range(2 * K):
        y = fmap.orbit_points(x, int(ns[i]))[-1]
        dist, j = tree.query(wrap(y) % 1.0)
        if mode == "nearest" or beta == 0:
            if dist > beta:
                raise PseudoOrbitError(f"no block point within beta={beta:.3g} of f^n(x_{i - K}): gap {dist:.3g}")
            x = pts[j]
        elif mode == "jitter":
            if dist > mesh:
                raise PseudoOrbitError(f"f^n(x_{i - K}) is {dist:.3g} from the block cloud (mesh {mesh:.3g})")
            ang = rng.uniform(0, 2 * np.pi)
            x = wrap(y + beta * rng.uniform(0.5, 1.0) * np.array([np.cos(ang), np.sin(ang)]))
        else:
            raise ValueError(f"unknown mode {mode!r}")
        out.append(x)
    return PseudoOrbit(np.array(out), ns, float(beta), float(block.t))


def true_orbit_pseudo_orbit(fmap, x_start, n, K):
    """beta = 0 chain cut from the forward orbit of x_start, which becomes x_{-K}."""
    ns = np.full(2 * K + 1, int(n))
    pts = fmap.orbit_points(np.asarray(x_start, dtype=float), 2 * K * n)[:: n]
    return PseudoOrbit(pts, ns, 0.0)


# ---------------------------------------------------------------------------
# constants

@dataclass
class ShadowConstants:
    t: float
    epsilon: float
    exponents: tuple
    r: float
    r1: float
    C0: float
    h1: float
    N1: int
    tau: float
    C1: float
    beta0: float
    N2: int
    alpha: float
    lam: float

    def as_dict(self):
        d = dict(self.__dict__)
        d["exponents"] = list(self.exponents)
        return d


def rate_lambda(exponents, epsilon):
    chiE, chiF = exponents
    return min(chiE - 2 * epsilon, -(chiF + 2 * epsilon))


def measure_c0(s: Splitting, sample_points, n_pairs=200, safety=1.25, seed=0):
    """Transversal-intersection distortion: max over samples of d(z, x)/d(x, y), z = E(x)-line ∩ F(y)-line.

    Straight lines stand in for admissible disks; the 1.25 factor absorbs the slope slack.
    """
    rng = np.random.default_rng(seed)
    pts = np.asarray(sample_points, dtype=float)
    idx = rng.integers(len(pts), size=n_pairs)
    fr = s.frames(pts[idx])
    E, F = fr[0][..., 0], fr[-1][..., 0]
    ang = rng.uniform(0, 2 * np.pi, n_pairs)
    d = np.column_stack([np.cos(ang), np.sin(ang)])  # y - x, unit length
    # x + a E = y + b F  =>  [E, -F] (a, b) = d
    M = np.stack([E, -F], axis=-1)
    ab = np.linalg.solve(M, d[..., None])[..., 0]
    zx = np.abs(ab[:, 0])
    zy = np.abs(ab[:, 1])
    return float(safety * max(1.0, np.max(np.maximum(zx, zy))))


def shadow_constants(exponents, epsilon, t, r, C0):
    """Constants of the shadowing construction; raises when the contraction factors are not < 1."""
    chiE, chiF = exponents
    lam = rate_lambda(exponents, epsilon)
    if lam <= 0:
        raise HypothesisError("nonpositive hyperbolicity rate")
    r1 = r * math.exp(-epsilon)
    h1 = 0.9 * min((r - r1) / (t * C0), r1 / (2 * t * C0 * math.exp(epsilon / 2)))
    rateF = chiF + 1.5 * epsilon
    if rateF >= 0:
        raise HypothesisError("chi_F + 3eps/2 must be negative")
    N1 = 1
    while not (math.exp(rateF * N1) < 1 / (2 * t) and C0 * t * math.exp(-lam * N1) < 1):
        N1 += 1
    tau = C0 * t * math.exp(-lam * N1)
    C1 = (1 + C0 + 3 * C0 ** 2) / (1 - tau) * t
    beta0 = (1 - tau) / C1 * h1
    N2 = N1
    while not (t * math.exp(-lam * N2) < 1 and 1 / t >= math.exp(-0.5 * epsilon * N2)):
        N2 += 1
    alpha = t * math.exp(-lam * N2)
    if not alpha < 1:
        raise HypothesisError("alpha >= 1")
    return ShadowConstants(t, epsilon, tuple(exponents), r, r1, C0, h1, N1, tau, C1, beta0, N2, alpha, lam)


# ---------------------------------------------------------------------------
# results

@dataclass
class ShadowResult:
    z: np.ndarray
    errors: list  # errors[i][j] = d(f^{s_k + j} z, f^j x_k), k = i - K, j = 0..n_k
    constants: dict
    envelope_pass: bool
    solver: str
    m_used: int = 0
    gaps: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return float(max(np.max(e) for e in self.errors))

    def to_dict(self):
        return {
            "solver": self.solver,
            "z": [float(v) for v in self.z],
            "m_used": self.m_used,
            "cauchy_gaps": [float(g) for g in self.gaps],
            "envelope_pass": bool(self.envelope_pass),
            "constants": _jsonable(self.constants),
            "max_error": self.max_error,
            "errors": [[float(v) for v in e] for e in self.errors],
            "notes": _jsonable(self.notes),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


@dataclass
class EnvelopeReport:
    residuals: list
    min_residual: float
    passed: bool


def verify_envelope(res: ShadowResult, C, beta, lam, ns=None):
    """Residuals C beta e^{-lam min(j, n_k - j)} - errors[k][j]; pass iff all >= -1e-12."""
    resid = []
    for e in res.errors:
        n = len(e) - 1
        j = np.arange(n + 1)
        resid.append(C * beta * np.exp(-lam * np.minimum(j, n - j)) - np.asarray(e))
    mn = float(min(np.min(r) for r in resid))
    return EnvelopeReport(resid, mn, mn >= -1e-12)


# ---------------------------------------------------------------------------
# constructive solver

class _Chains:
    """F-chains (pulled back) and E-chains (pushed forward) of disks along the pseudo-orbit segments."""

    def __init__(self, gmap, s, po: PseudoOrbit, const: ShadowConstants, frames=None):
        self.g = gmap
        self.po = po
        self.c = const
        self.segs = po.segments(gmap)
        self.orbs = [OrbitFrames(gmap, s, seg) for seg in self.segs] if frames is None else frames
        self.rev = reverse(gmap)
        self.small = const.r1 / const.t

    def _check_offset(self, disk, where):
        if disk.h > self.c.h1:
            raise ChartError(f"admissibility offset {disk.h:.3g} exceeds h1={self.c.h1:.3g} at {where}")

    def f_chain(self, k_top, k_bottom, keep=False):
        """Pull a straight F-disk at x_{k_top} (or the end of the last segment) back to x_{k_bottom}."""
        K = self.po.K
        if k_top > K:  # start beyond the window: the end point of segment K
            orb = self.orbs[-1]
            n = len(orb) - 1
            D = straight_disk(orb.points[n], orb.F[n], orb.E[n], "F", self.small)
            k_top = K + 1
        else:
            orb = self.orbs[k_top + K]
            D = straight_disk(orb.points[0], orb.F[0], orb.E[0], "F", self.small)
        store = {}
        for k in range(k_top - 1, k_bottom - 1, -1):
            orb = self.orbs[k + K]
            n = len(orb) - 1
            D = reanchor(D, orb.points[n], orb.frame(n, "F")).clip(self.small)
            self._check_offset(D, f"k={k}, j={n}")
            disks = [None] * (n + 1)
            disks[n] = D
            for j in range(n - 1, -1, -1):
                disks[j] = pullback(disks[j + 1], self.g, orb.points[j], orb.frame(j, "F"), self.c.r)
            D = disks[0].clip(self.small)
            disks[0] = D
            if keep:
                store[k] = disks
        return D, store

    def e_chain(self, k_bottom, k_top, keep=False):
        """Push a straight E-disk at x_{k_bottom} forward through segments k_bottom..k_top-1 to x_{k_top}."""
        K = self.po.K
        orb = self.orbs[k_bottom + K]
        D = straight_disk(orb.points[0], orb.E[0], orb.F[0], "E", self.small)
        store = {}
        last = min(k_top, K + 1)
        for k in range(k_bottom, last):
            orb = self.orbs[k + K]
            n = len(orb) - 1
            disks = [None] * (n + 1)
            disks[0] = D
            for j in range(1, n + 1):
                disks[j] = pushforward(disks[j - 1], self.g, orb.points[j], orb.frame(j, "E"), self.c.r)
            if keep:
                store[k] = disks
            D = disks[n]
            if k + 1 <= K:
                nxt = self.orbs[k + 1 + K]
                D = reanchor(D, nxt.points[0], nxt.frame(0, "E")).clip(self.small)
                self._check_offset(D, f"k={k + 1}, j=0")
            else:
                D = D.clip(self.small)
        return D, store


def _check_preconditions(po, gmap, const, segs, check_blocks, orbs=None):
    notes = {}
    if np.any(po.ns < const.N1):
        raise HypothesisError(f"n_k must be >= N1={const.N1}")
    jumps = po.jumps(gmap, segs)
    notes["max_jump"] = float(jumps.max(initial=0.0))
    if po.beta == po.beta and notes["max_jump"] > po.beta * (1 + 1e-9) + 1e-15:
        raise HypothesisError(f"measured jump {notes['max_jump']:.3g} exceeds declared beta {po.beta:.3g}")
    if notes["max_jump"] >= const.beta0:
        raise HypothesisError(f"jumps {notes['max_jump']:.3g} not below beta0={const.beta0:.3g}")
    if check_blocks and orbs is not None:
        worst = min(min(averf_hypotheses(o, const.exponents, const.epsilon, const.t)) for o in orbs)
        notes["segment_hypothesis_residual"] = worst
        if worst < -1e-10:
            raise HypothesisError(f"a segment violates the level-t block bounds (residual {worst:.3g})")
    return notes


def shadow_constructive(gmap: DiscreteMap, s: Splitting, po: PseudoOrbit, const: ShadowConstants,
                        m_max=None, cauchy_tol=1e-14, check_blocks=True, envelope_C=None, profile=True):
    """Shadow by intersecting F-disk chains (from x_m backwards) with E-disk chains (from x_{-m} forwards).

    z_m is the intersection at x_0; m grows until successive z_m differ by less than cauchy_tol.
    The error profile is read off the full-window chains, as the per-step intersections.
    """
    ch = _Chains(gmap, s, po, const)
    notes = _check_preconditions(po, gmap, const, ch.segs, check_blocks, ch.orbs)
    K = po.K
    m_max = K if m_max is None else min(m_max, K)
    x0 = po.x(0)
    zs, gaps = [], []
    m_used = 0
    for m in range(1, m_max + 1):
        dF, _ = ch.f_chain(m, 0)
        dE, _ = ch.e_chain(-m, 0)
        z, offE, _, _ = intersect_disks(dE, dF, return_offsets=True)
        zs.append(offE)  # offsets from x_0 keep the gap computation exact
        m_used = m
        if len(zs) > 1:
            gaps.append(float(np.linalg.norm(zs[-1] - zs[-2])))
            if gaps[-1] < cauchy_tol:
                break
    else:
        if m_max > 1 and gaps and gaps[-1] >= cauchy_tol and m_max < K:
            raise ConvergenceError(f"Cauchy stall: gaps {gaps}")
    C = const.C1 if envelope_C is None else envelope_C
    notes["z_offset"] = zs[-1].tolist()
    if not profile:
        res = ShadowResult(wrap(x0 + zs[-1]), [np.zeros(1)], const.as_dict(), False, "constructive", m_used, gaps, notes)
        res.z_offset = zs[-1]
        return res
    # full window profile
    _, Fst = ch.f_chain(K + 1, -K, keep=True)
    _, Est = ch.e_chain(-K, K + 1, keep=True)
    errors = []
    offs0 = None
    for k in range(-K, K + 1):
        n = po.n(k)
        e = np.empty(n + 1)
        for j in range(n + 1):
            _, oE, _, _ = intersect_disks(Est[k][j], Fst[k][j], return_offsets=True)
            e[j] = np.linalg.norm(oE)
            if k == 0 and j == 0:
                offs0 = oE
        errors.append(e)
    z = wrap(x0 + zs[-1])
    notes["full_window_vs_m"] = float(np.linalg.norm(offs0 - zs[-1]))
    res = ShadowResult(z, errors, const.as_dict(), False, "constructive", m_used, gaps, notes)
    env = verify_envelope(res, C, max(po.beta, 0.0), const.lam)
    res.envelope_pass = env.passed
    res.notes["envelope_min_residual"] = env.min_residual
    res.z_offset = zs[-1]
    return res


# ---------------------------------------------------------------------------
# Newton oracle

def _expand(gmap, po, segs=None):
    segs = po.segments(gmap) if segs is None else segs
    ref = []
    for i, seg in enumerate(segs):
        ref.append(seg[:-1])
    ref.append(segs[-1][-1:])
    P = np.concatenate(ref)
    # defect of the reference sequence: wrapped f(p_i) - p_{i+1}
    starts = np.cumsum([0] + [len(sg) - 1 for sg in segs])
    return P, starts, segs


def shadow_newton(gmap: DiscreteMap, po: PseudoOrbit, L=200_000, tol=1e-15, max_iter=100, lam=None, C=None):
    """Stacked-residual Newton on z_{i+1} = g(z_i) with free ends (minimum-norm steps)."""
    total = int(po.ns.sum())
    if total > L:
        raise SolverError(f"expanded length {total} exceeds cap {L}")
    P, starts, segs = _expand(gmap, po)
    S = len(P) - 1
    d = gmap.dim
    defect = displacement(P[1:], gmap.forward(P[:-1]))  # g(p_i) - p_{i+1}
    e = np.zeros_like(P)

    def residual(e):
        return defect + gmap.step_offset(P[:-1], e[:-1]) - e[1:]

    r = residual(e)
    rn = float(np.max(np.abs(r)))
    it = 0
    for it in range(1, max_iter + 1):
        if rn <= tol:
            it -= 1
            break
        J = gmap.derivative(wrap(P[:-1] + e[:-1]))
        rows = np.arange(S * d).reshape(S, d)
        data, ri, ci = [], [], []
        for a in range(d):
            for b in range(d):
                data.append(J[:, a, b]); ri.append(rows[:, a]); ci.append(rows[:, b])
            data.append(-np.ones(S)); ri.append(rows[:, a]); ci.append(rows[:, a] + d)
        M = sp.csr_matrix((np.concatenate(data), (np.concatenate(ri), np.concatenate(ci))), shape=(S * d, (S + 1) * d))
        MMt = (M @ M.T).tocsc()
        y = spla.spsolve(MMt, -r.reshape(-1))
        step = (M.T @ y).reshape(S + 1, d)
        a = 1.0
        while True:
            e_new = e + a * step
            r_new = residual(e_new)
            rn_new = float(np.max(np.abs(r_new)))
            if rn_new < rn or a < 1e-6:
                break
            a *= 0.5
        if rn_new >= rn and rn > tol:
            if rn < 1e-13:
                break
            raise SolverError(f"Newton stalled at residual {rn:.3e}")
        e, r, rn = e_new, r_new, rn_new
    else:
        if rn > max(tol, 1e-13):
            raise SolverError(f"Newton did not converge (residual {rn:.3e})")
    K = po.K
    errors = []
    for i in range(len(po.ns)):
        n = int(po.ns[i])
        a0 = starts[i]
        seg_e = e[a0: a0 + n]
        last = e[a0 + n] + displacement(segs[i][-1], P[a0 + n])  # position of f^{n_k} x_k
        errs = np.concatenate([np.linalg.norm(seg_e, axis=-1), [np.linalg.norm(last)]])
        errors.append(errs)
    i0 = starts[K]
    z = wrap(P[i0] + e[i0])
    res = ShadowResult(z, errors, {}, False, "newton", 0, [], {"iterations": it, "residual": rn})
    res.z_offset = e[i0].copy()
    if lam is not None and C is not None:
        env = verify_envelope(res, C, po.beta, lam)
        res.envelope_pass = env.passed
        res.notes["envelope_min_residual"] = env.min_residual
        res.constants = {"C": C, "lam": lam}
    return res


def linear_single_jump(A, x0, n0, d):
    """Closed-form shadow of a linear toral automorphism with one jump d after n0 steps from x0.

    Returns z0 = x0 + A^{-n0} P_u d, with P_u, P_s the spectral projections.
    """
    A = np.asarray(A, dtype=float)
    w, V = np.linalg.eig(A)
    Vi = np.linalg.inv(V)
    un = np.abs(w) > 1
    # A^{-n0} P_u = sum over unstable eigenvalues of w^{-n0} v v*; avoids cancellation in A^{-n0}
    corr = (V[:, un] * w[un] ** (-float(n0))) @ (Vi[un, :] @ np.asarray(d, dtype=complex))
    return wrap(np.asarray(x0) + corr.real)


# ---------------------------------------------------------------------------
# periodic closing

@dataclass
class PeriodicCertificate:
    p: np.ndarray
    period: int
    residual: float  # max multiple-shooting defect over the cycle
    direct_residual: float  # d(f^{n0}(p), p) by plain iteration, for reference
    floquet: dict  # {"E": log m(Df^{n0}|E), "F": log |Df^{n0}|F|}
    lam: float
    passed: bool
    cycle: np.ndarray = None
    notes: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "p": [float(v) for v in self.p],
            "period": self.period,
            "residual": self.residual,
            "direct_residual": self.direct_residual,
            "floquet": {k: float(v) for k, v in self.floquet.items()},
            "lambda": self.lam,
            "passed": bool(self.passed),
            "notes": _jsonable(self.notes),
        }


def periodic_newton(fmap: DiscreteMap, seed_points, tol=1e-15, max_iter=100, nxt=None):
    """Multiple-shooting Newton for a cycle q_0..q_{n-1} with f(q_i) = q_{i+1 mod n}.

    ``nxt`` overrides the successor map, so several cycles can be solved in one sparse system.
    """
    Q = np.array(seed_points, dtype=float)
    n, d = Q.shape
    nxt = np.roll(np.arange(n), -1) if nxt is None else np.asarray(nxt)

    def residual(Q):
        return displacement(Q[nxt], fmap.forward(Q))

    rn = float(np.max(np.abs(residual(Q))))
    rows = np.arange(n * d).reshape(n, d)
    for it in range(max_iter):
        if rn <= tol:
            break
        r = residual(Q)
        J = fmap.derivative(Q)
        data, ri, ci = [], [], []
        for a in range(d):
            for b in range(d):
                data.append(J[:, a, b]); ri.append(rows[:, a]); ci.append(rows[:, b])
            data.append(-np.ones(n)); ri.append(rows[:, a]); ci.append(rows[nxt, a])
        M = sp.csc_matrix((np.concatenate(data), (np.concatenate(ri), np.concatenate(ci))), shape=(n * d, n * d))
        step = spla.spsolve(M, -r.reshape(-1)).reshape(n, d)
        a = 1.0
        while True:
            Qn = wrap(Q + a * step)
            rn_new = float(np.max(np.abs(residual(Qn))))
            if rn_new < rn or a < 1e-6:
                break
            a *= 0.5
        if rn_new >= rn:
            break
        Q, rn = Qn, rn_new
    if rn > 1e-10:
        raise SolverError(f"periodic Newton failed (residual {rn:.3e})")
    return Q, rn


def floquet_data(fmap: DiscreteMap, s: Splitting, cycle):
    """One-period (log co-norm on E, log norm on F) along a cycle, from per-step restricted norms."""
    cyc = np.asarray(cycle, dtype=float)
    fr = s.frames(cyc)
    E, F = fr[0][..., 0], fr[-1][..., 0]
    J = fmap.derivative(cyc)
    logE = float(np.sum(np.log(np.linalg.norm(np.einsum("nij,nj->ni", J, E), axis=-1))))
    logF = float(np.sum(np.log(np.linalg.norm(np.einsum("nij,nj->ni", J, F), axis=-1))))
    return {"E": logE, "F": logF}


def period_eigen_logs(fmap, cycle):
    """Log moduli of eigenvalues of Df^{n0} via a QR-accumulated product (descending)."""
    cyc = np.asarray(cycle, dtype=float)
    J = fmap.derivative(cyc)
    d = J.shape[-1]
    Q = np.eye(d)
    logs = np.zeros(d)
    # Lyapunov of the period map by repeated QR over many periods
    reps = 20
    for _ in range(reps):
        for M in J:
            Q, R = np.linalg.qr(M @ Q)
            logs += np.log(np.abs(np.diag(R)))
    return np.sort(logs / reps)[::-1]


def close_periodic(fmap: DiscreteMap, s: Splitting, po: PseudoOrbit, const: ShadowConstants = None,
                   lam_required=None, polish_tol=1e-15, constructive=True):
    """Close a periodic pseudo-orbit (x_k = x_0, n_k = n_0) to a hyperbolic periodic point."""
    x0 = po.x(0)
    n0 = po.n(0)
    if np.any(po.ns != n0) or np.any(np.abs(displacement(po.points, x0)) > 0):
        raise PseudoOrbitError("pseudo-orbit is not periodic")
    notes = {}
    seg = fmap.orbit_points(x0, n0)
    gap = torus_distance(seg[-1], x0)
    notes["gap"] = gap
    if const is not None:
        if n0 < const.N2:
            raise HypothesisError(f"period {n0} below N2={const.N2}")
        if gap >= const.beta0:
            raise HypothesisError(f"return gap {gap:.3g} not below beta0={const.beta0:.3g}")
    z = x0
    if constructive and gap > 0 and const is not None:
        res = shadow_constructive(fmap, s, po, const, m_max=1 if po.K == 1 else None, check_blocks=False,
                                  profile=False)
        z = res.z
        notes["constructive_offset"] = float(np.linalg.norm(res.z_offset))
    # multiple-shooting seed: the pseudo-orbit segment itself, closed up by the gap
    seedcyc = seg[:-1].copy()
    pre = float(np.max(np.abs(displacement(np.roll(seedcyc, -1, axis=0), fmap.forward(seedcyc)))))
    notes["residual_before_polish"] = pre
    cyc, rn = periodic_newton(fmap, seedcyc, tol=polish_tol)
    p = cyc[0]
    # plain iteration loses ~e^{chi n0} of precision; only meaningful for short periods
    direct = torus_distance(fmap.orbit_points(p, n0)[-1], p) if n0 <= 40 else float("nan")
    fl = floquet_data(fmap, s, cyc)
    lam_p = min(fl["E"] / n0, -fl["F"] / n0)
    if lam_required is None:
        lam_required = 0.0
    passed = lam_p > 0 and lam_p >= lam_required and rn <= 1e-10
    notes["polish_shift"] = float(torus_distance(p, z))  # constructive point vs polished cycle
    cert = PeriodicCertificate(p, n0, rn, direct, fl, lam_p, passed, cyc, notes)
    if lam_p <= 0:
        raise SolverError("hyperbolicity margin <= 0")
    return cert


def periodic_pseudo_orbit(x0, n0, K=2, beta=None, fmap=None):
    pts = np.tile(np.asarray(x0, dtype=float), (2 * K + 1, 1))
    if beta is None and fmap is not None:
        beta = torus_distance(fmap.orbit_points(np.asarray(x0, dtype=float), n0)[-1], x0)
    return PseudoOrbit(pts, np.full(2 * K + 1, n0), float(beta if beta is not None else 0.0), periodic=True)


# ---------------------------------------------------------------------------
# f -> f^N lifting

@dataclass
class LiftedPseudoOrbit:
    po: PseudoOrbit
    phases: np.ndarray
    beta_hat: float
    C_hat: float | None = None


def assign_phases(points, component_clouds, beta):
    """Phase of each point: index of the nearest component cloud; refuses ambiguous assignments."""
    trees = [cKDTree(wrap(np.asarray(c)) % 1.0, boxsize=1.0) for c in component_clouds]
    phases = []
    for x in np.atleast_2d(points):
        dists = np.array([t.query(wrap(x) % 1.0)[0] for t in trees])
        order = np.argsort(dists, kind="stable")
        if len(dists) > 1 and dists[order[1]] - dists[order[0]] < beta:
            raise PseudoOrbitError("phase assignment ambiguous: two components within beta")
        phases.append(int(order[0]))
    return np.array(phases)


def lift_pseudo_orbit(fmap: DiscreteMap, po: PseudoOrbit, N: int, phases=None, const: ShadowConstants = None):
    """Pseudo-orbit for g = f^N: x̂_k = f^{-p_{k-1}}(x_k), n̂_k = (n_k - p_k + p_{k-1})/N."""
    N = int(N)
    if phases is None:
        phases = np.zeros(len(po.ns), dtype=int)
    phases = np.asarray(phases, dtype=int)
    if np.any((phases < 0) | (phases >= N)):
        raise PseudoOrbitError("phases must lie in [0, N-1]")
    K = po.K
    pts, ns = [], []
    for i in range(len(po.ns)):
        p_prev = int(phases[i - 1]) if i > 0 else int(phases[i])
        num = int(po.ns[i]) - int(phases[i]) + p_prev
        if num % N:
            raise PseudoOrbitError(f"divisibility fails at k={i - K}: N={N} does not divide {num}")
        x = po.points[i]
        for _ in range(p_prev):
            x = fmap.inverse(x)
        pts.append(x)
        ns.append(num // N)
    J = fmap.derivative(np.atleast_2d(po.points))
    norm_inv = float(np.max(np.linalg.norm(np.linalg.inv(J), ord=2, axis=(1, 2)))) if N > 1 else 1.0
    beta_hat = po.beta * norm_inv ** max(N - 1, 0) if N > 1 else po.beta
    C_hat = None
    if const is not None:
        normD = float(np.max(np.linalg.norm(J, ord=2, axis=(1, 2))))
        C_hat = const.C1 * normD ** (2 * N) * math.exp(2 * const.lam * N)
    lifted = PseudoOrbit(np.array(pts), np.array(ns), beta_hat, po.block_level, po.periodic)
    return LiftedPseudoOrbit(lifted, phases, beta_hat, C_hat)


def power_map(fmap, N):
    return fmap if N == 1 else PowerMap(fmap, N)
