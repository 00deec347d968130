"""Cone fields, admissible disks as Chebyshev graphs, graph transforms and local manifolds.

Disks live on the 2-torus and are graphs over a one-dimensional bundle fiber:
with anchor a and oblique frame B = [base | fiber] (unit columns taken from
the splitting at a), the disk is {a + B (s, phi(s)) : lo <= s <= hi}.
All geometry is done in offsets from anchors, never in absolute coordinates,
so that contraction along the disk is not swamped by rounding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from functools import lru_cache

import numpy as np
from numpy.polynomial import chebyshev as C

from .systems import DiscreteMap, Splitting, displacement, reverse, wrap

DEGREE = 16
OVERSAMPLE = 4
NEWTON_TOL = 1e-14


class ChartError(RuntimeError):
    pass


class HypothesisError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# cones

@dataclass
class ConeField:
    """Cone of width theta around the base bundle at one point."""

    E: np.ndarray
    F: np.ndarray
    theta: float
    base: str = "F"

    def split(self, v):
        B = np.column_stack([self.E.reshape(-1), self.F.reshape(-1)])
        cE, cF = np.linalg.solve(B, np.asarray(v, dtype=float))
        return cE * self.E.reshape(-1), cF * self.F.reshape(-1)


def cone_membership(v, cone: ConeField):
    """(member, margin) with margin = theta |v_base| - |v_other| in frame coordinates."""
    v = np.asarray(v, dtype=float)
    if not np.any(v):
        raise ValueError("zero vector has no cone direction")
    vE, vF = cone.split(v)
    nb, no = (np.linalg.norm(vF), np.linalg.norm(vE)) if cone.base == "F" else (np.linalg.norm(vE), np.linalg.norm(vF))
    margin = cone.theta * nb - no
    return bool(margin >= 0), float(margin)


def cone_width(v, E, F, base="F"):
    """Smallest theta whose cone around `base` contains v."""
    cone = ConeField(np.asarray(E).reshape(-1), np.asarray(F).reshape(-1), 1.0, base)
    vE, vF = cone.split(v)
    nb, no = (np.linalg.norm(vF), np.linalg.norm(vE)) if base == "F" else (np.linalg.norm(vE), np.linalg.norm(vF))
    return np.inf if nb == 0 else float(no / nb)


# ---------------------------------------------------------------------------
# Chebyshev graphs

@lru_cache(maxsize=None)
def _cheb_setup(deg):
    """Second-kind nodes (ascending), barycentric weights, differentiation matrix, values->coefficients."""
    x = -np.cos(np.pi * np.arange(deg + 1) / deg)
    w = (-1.0) ** np.arange(deg + 1)
    w[0] *= 0.5
    w[-1] *= 0.5
    dx = x[:, None] - x[None, :]
    np.fill_diagonal(dx, 1.0)
    D = (w[None, :] / w[:, None]) / dx
    np.fill_diagonal(D, 0.0)
    np.fill_diagonal(D, -D.sum(axis=1))
    Vinv = np.linalg.inv(C.chebvander(x, deg))
    return x, w, D, Vinv


@lru_cache(maxsize=None)
def _gauss(npts):
    return np.polynomial.legendre.leggauss(npts)


def _bary(t, vals, x, w):
    t = np.asarray(t, dtype=float)
    flat = t.reshape(-1)
    diff = flat[:, None] - x[None, :]
    exact = diff == 0
    diff[exact] = 1.0
    q = w[None, :] / diff
    out = (q @ vals) / q.sum(axis=1)
    hit = exact.any(axis=1)
    if hit.any():
        out[hit] = vals[np.argmax(exact[hit], axis=1)]
    return out.reshape(t.shape)


class ChebGraph:
    """Polynomial graph on [lo, hi] held by its values at Chebyshev points of the second kind."""

    def __init__(self, lo, hi, values):
        self.lo = float(lo)
        self.hi = float(hi)
        self.values = np.asarray(values, dtype=float)
        self._dvals = {}

    @staticmethod
    def nodes(lo, hi, deg=DEGREE):
        x = _cheb_setup(deg)[0]
        return 0.5 * (lo + hi) + 0.5 * (hi - lo) * x

    @classmethod
    def from_values(cls, lo, hi, vals):
        return cls(lo, hi, vals)

    @classmethod
    def from_coefficients(cls, lo, hi, coef):
        x = _cheb_setup(len(coef) - 1)[0]
        return cls(lo, hi, C.chebval(x, np.asarray(coef, dtype=float)))

    @classmethod
    def zero(cls, lo, hi, deg=DEGREE):
        return cls(lo, hi, np.zeros(deg + 1))

    @property
    def degree(self):
        return len(self.values) - 1

    @property
    def coef(self):
        return _cheb_setup(self.degree)[3] @ self.values

    def _t(self, s):
        w = self.hi - self.lo
        s = np.asarray(s, dtype=float)
        if w == 0:  # degenerate disk: a single point
            return np.zeros_like(s)
        return (2 * s - (self.lo + self.hi)) / w

    def __call__(self, s):
        x, w, _, _ = _cheb_setup(self.degree)
        return _bary(self._t(s), self.values, x, w)

    def deriv(self, s, m=1):
        if self.hi == self.lo:
            return np.zeros_like(np.asarray(s, dtype=float))
        x, w, D, _ = _cheb_setup(self.degree)
        if m not in self._dvals:
            v = self.values
            for _ in range(m):
                v = D @ v
            self._dvals[m] = v * (2.0 / (self.hi - self.lo)) ** m
        return _bary(self._t(s), self._dvals[m], x, w)

    def restrict(self, lo, hi):
        """Same polynomial on a sub-interval (exact up to rounding)."""
        return ChebGraph(lo, hi, self(self.nodes(lo, hi, self.degree)))

    def tail(self):
        """Size of the highest coefficients, a proxy for truncation error."""
        return float(np.sum(np.abs(self.coef[-2:])))


# ---------------------------------------------------------------------------
# disks

@dataclass
class AdmissibleDisk:
    anchor: np.ndarray
    frame: np.ndarray  # columns: base direction, fiber direction (unit)
    base: str
    graph: ChebGraph
    slope: float = 0.0
    radius_decl: float | None = None

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=float)
        self.frame = np.asarray(self.frame, dtype=float)
        self._finv = np.linalg.inv(self.frame)
        if self.slope == 0.0:
            self.slope = certify_slope(self.graph)

    @property
    def lo(self):
        return self.graph.lo

    @property
    def hi(self):
        return self.graph.hi

    def offsets(self, s):
        s = np.asarray(s, dtype=float)
        return s[..., None] * self.frame[:, 0] + self.graph(s)[..., None] * self.frame[:, 1]

    def tangents(self, s):
        s = np.asarray(s, dtype=float)
        return self.frame[:, 0] + self.graph.deriv(s)[..., None] * self.frame[:, 1]

    def points(self, s):
        return wrap(self.anchor + self.offsets(s))

    def coords(self, offset):
        """Frame coordinates (s, u) of an offset from the anchor."""
        return np.asarray(offset, dtype=float) @ self._finv.T

    def speed(self, s):
        return np.linalg.norm(self.tangents(s), axis=-1)

    def arclength(self, s):
        """Signed arclength from the foot s = 0 to s."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        xg, wg = _gauss(24)
        pts = 0.5 * s[:, None] * (xg[None, :] + 1.0)
        out = 0.5 * s * np.sum(wg[None, :] * self.speed(pts), axis=1)
        return out

    def arclength_inverse(self, ell):
        """Parameter s with arclength(s) = ell (Newton, starting from ell/speed(0))."""
        s = ell / float(self.speed(0.0))
        for _ in range(30):
            g = float(self.arclength(s)[0]) - ell
            s -= g / float(self.speed(s))
            if abs(g) < 1e-15 * max(1.0, abs(ell)):
                break
        return s

    @property
    def radius(self):
        """Intrinsic radius about the foot: distance along the disk to the nearer end."""
        if not (self.lo <= 0.0 <= self.hi):
            return 0.0
        a = self.arclength(np.array([self.lo, self.hi]))
        return float(min(-a[0], a[1]))

    @property
    def foot_offset(self):
        return self.offsets(0.0)

    @property
    def center(self):
        return self.points(0.0)

    @property
    def h(self):
        """Distance from the anchor to the disk's foot."""
        return float(np.linalg.norm(self.foot_offset))

    def clip(self, radius):
        """Sub-disk of intrinsic radius `radius` about the foot (or the whole disk if smaller)."""
        if not (self.lo <= 0.0 <= self.hi):
            raise ChartError("disk does not cross the fiber through its anchor")
        if radius <= 0:
            g = ChebGraph.from_values(0.0, 0.0, np.full(self.graph.degree + 1, float(self.graph(0.0))))
            return AdmissibleDisk(self.anchor, self.frame, self.base, g, 0.0, 0.0)
        lo = max(self.lo, self.arclength_inverse(-radius))
        hi = min(self.hi, self.arclength_inverse(radius))
        g = self.graph.restrict(lo, hi)
        return AdmissibleDisk(self.anchor, self.frame, self.base, g, 0.0, radius)

    def sample(self, n=64):
        s = np.linspace(self.lo, self.hi, n)
        return s, self.points(s)

    def to_dict(self):
        return {
            "anchor": self.anchor.tolist(),
            "frame": self.frame.tolist(),
            "base": self.base,
            "domain": [self.lo, self.hi],
            "node_values": self.graph.values.tolist(),
            "chebyshev_coefficients": self.graph.coef.tolist(),
            "slope": self.slope,
            "radius": self.radius,
            "center": self.center.tolist(),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        g = ChebGraph(d["domain"][0], d["domain"][1], np.array(d["node_values"]))
        return cls(np.array(d["anchor"]), np.array(d["frame"]), d["base"], g, d["slope"])


def certify_slope(graph: ChebGraph) -> float:
    """max |phi'| on an oversampled grid plus a truncation margin."""
    if graph.hi - graph.lo <= 0:
        return 0.0
    s = np.linspace(graph.lo, graph.hi, OVERSAMPLE * graph.degree + 1)
    d = np.abs(graph.deriv(s))
    margin = graph.tail() * graph.degree ** 2 * 2.0 / (graph.hi - graph.lo)
    return float(d.max() + margin)


def straight_disk(anchor, base_dir, fiber_dir, base, radius, deg=DEGREE, offset=None):
    """Straight segment along base_dir through anchor (+ optional offset), radius about its foot."""
    frame = np.column_stack([base_dir, fiber_dir])
    if offset is None:
        g = ChebGraph.zero(-radius, radius, deg)
    else:
        s0, u0 = np.linalg.solve(frame, np.asarray(offset, dtype=float))
        g = ChebGraph.from_values(-radius + s0, radius + s0, np.full(deg + 1, u0))
        # the foot sits at s = 0; the intrinsic radius is then measured from there
    d = AdmissibleDisk(np.asarray(anchor, dtype=float), frame, base, g, 0.0, radius)
    return d


def c0_distance(d1: AdmissibleDisk, d2: AdmissibleDisk):
    """(sup |phi1 - phi2|, sup |phi1' - phi2'|) on the common domain; both disks share the anchor frame."""
    lo, hi = max(d1.lo, d2.lo), min(d1.hi, d2.hi)
    if hi <= lo:
        return np.inf, np.inf
    s = np.linspace(lo, hi, 4 * DEGREE + 1)
    if not np.allclose(d1.frame, d2.frame, atol=1e-14) or np.any(displacement(d1.anchor, d2.anchor) != 0):
        d2 = reanchor(d2, d1.anchor, d1.frame)
    return (float(np.max(np.abs(d1.graph(s) - d2.graph(s)))),
            float(np.max(np.abs(d1.graph.deriv(s) - d2.graph.deriv(s)))))


def reanchor(disk: AdmissibleDisk, anchor, frame=None, deg=None) -> AdmissibleDisk:
    """Same curve expressed as a graph over the frame at a new anchor."""
    anchor = np.asarray(anchor, dtype=float)
    frame = disk.frame if frame is None else np.asarray(frame, dtype=float)
    deg = deg or disk.graph.degree
    shift = displacement(anchor, disk.anchor)
    finv = np.linalg.inv(frame)

    def new_coords(s):
        return (disk.offsets(s) + shift) @ finv.T

    ends = new_coords(np.array([disk.lo, disk.hi]))
    lo, hi = sorted(ends[:, 0])
    tgt = ChebGraph.nodes(lo, hi, deg)
    # invert s -> new base coordinate by Newton
    s = np.interp(tgt, ends[:, 0] if ends[0, 0] < ends[1, 0] else ends[::-1, 0],
                  [disk.lo, disk.hi] if ends[0, 0] < ends[1, 0] else [disk.hi, disk.lo])
    for _ in range(40):
        c = new_coords(s)
        ds = (disk.tangents(s) @ finv.T)[:, 0]
        step = (c[:, 0] - tgt) / ds
        s = np.clip(s - step, disk.lo, disk.hi)
        if np.max(np.abs(step)) < 1e-16:
            break
    c = new_coords(s)
    g = ChebGraph.from_values(lo, hi, c[:, 1])
    return AdmissibleDisk(anchor, frame, disk.base, g, 0.0)


# ---------------------------------------------------------------------------
# graph transform

@dataclass
class StepRecord:
    anchor_index: int
    radius: float
    slope: float
    h: float
    newton_iters: int


def pullback(next_disk: AdmissibleDisk, hmap: DiscreteMap, anchor, frame, r: float,
             deg=DEGREE, clip=True) -> AdmissibleDisk:
    """Graph transform: (h^{-1}(next_disk)) ∩ (intrinsic r-ball about the foot), as a graph at anchor.

    h(anchor) must coincide with next_disk.anchor up to rounding.
    """
    anchor = np.asarray(anchor, dtype=float)
    B = np.asarray(frame, dtype=float)
    Binv = np.linalg.inv(B)
    Bn = next_disk.frame
    mismatch = displacement(next_disk.anchor, hmap.forward(anchor))
    if np.max(np.abs(mismatch)) > 1e-8:
        raise ChartError("anchor does not map to the next disk's anchor")
    # preimages of the next disk's end points fix the maximal domain
    end_off = next_disk.offsets(np.array([next_disk.lo, next_disk.hi])) - mismatch
    pre = hmap.inverse_step_offset(np.broadcast_to(next_disk.anchor, (2, 2)), end_off,
                                   pre=np.broadcast_to(anchor, (2, 2)))
    pre_c = pre @ Binv.T
    lo_pre, hi_pre = sorted(pre_c[:, 0])
    J0 = hmap.derivative(anchor)
    if clip:
        # predicted slope at the foot from the pulled-back tangent of the next disk
        v = np.linalg.solve(J0, next_disk.tangents(0.0)) if next_disk.lo <= 0 <= next_disk.hi else B[:, 0]
        vc = Binv @ v
        sp = float(np.linalg.norm(B[:, 0] + (vc[1] / vc[0]) * B[:, 1]))
        lo, hi = max(lo_pre, -r / sp), min(hi_pre, r / sp)
    else:
        lo, hi = lo_pre, hi_pre
    if not lo < 0 < hi:
        raise ChartError("pulled-back disk does not cross the anchor fiber")
    for attempt in range(3):
        s, u, sig, iters = _solve_nodes(next_disk, hmap, anchor, B, Binv, mismatch, lo, hi, deg, J0)
        g = ChebGraph.from_values(lo, hi, u)
        disk = AdmissibleDisk(anchor, B, next_disk.base, g, 0.0, r if clip else None)
        if not clip:
            break
        a = disk.arclength(np.array([lo, hi]))
        new_lo = lo if lo == lo_pre else lo * r / -a[0]
        new_hi = hi if hi == hi_pre else hi * r / a[1]
        new_lo, new_hi = max(lo_pre, new_lo), min(hi_pre, new_hi)
        if abs(new_lo - lo) <= 1e-4 * abs(lo) and abs(new_hi - hi) <= 1e-4 * abs(hi):
            break
        lo, hi = new_lo, new_hi
    disk.newton_iters = iters
    return disk


def _solve_nodes(next_disk, hmap, anchor, B, Binv, mismatch, lo, hi, deg, J0):
    s = ChebGraph.nodes(lo, hi, deg)
    n = len(s)
    Bn = next_disk.frame
    Bninv = np.linalg.inv(Bn)
    # linear initial guess
    img = (np.column_stack([s, np.zeros(n)]) @ B.T) @ J0.T + mismatch
    sig = (img @ Bninv.T)[:, 0]
    u = np.zeros(n)
    # one fixed-point sweep for u using the linearization
    A = Bninv @ J0 @ B  # maps (s,u) to next-frame coords
    if abs(A[1, 1] - A[0, 1] * next_disk.graph.deriv(np.clip(sig, next_disk.lo, next_disk.hi)).mean()) > 0:
        pass
    anchors = np.broadcast_to(anchor, (n, 2))
    it = 0
    for it in range(1, 60):
        off = np.column_stack([s, u]) @ B.T
        res = hmap.step_offset(anchors, off) + mismatch - next_disk.offsets(sig)
        J = hmap.derivative(anchors + off)
        col_u = J @ B[:, 1]
        col_sig = -next_disk.tangents(sig)
        M = np.stack([col_u, col_sig], axis=-1)
        delta = np.linalg.solve(M, -res[..., None])[..., 0]
        u = u + delta[:, 0]
        sig = sig + delta[:, 1]
        if np.max(np.abs(delta)) <= NEWTON_TOL * max(1.0, abs(hi - lo)):
            break
    else:
        raise ConvergenceError("graph-transform Newton did not converge")
    tol = 1e-9 * (next_disk.hi - next_disk.lo) + 1e-15
    if np.any(sig < next_disk.lo - tol) or np.any(sig > next_disk.hi + tol):
        raise ChartError("graph leaves the chart: preimage outside the next disk")
    return s, u, sig, it


def pushforward(disk: AdmissibleDisk, gmap: DiscreteMap, anchor, frame, r: float,
                deg=DEGREE, clip=True) -> AdmissibleDisk:
    """Forward graph transform: g(disk) ∩ (intrinsic r-ball about the foot), as a graph at anchor.

    Uses forward evaluations only; anchor must equal g(disk.anchor) up to rounding.
    """
    anchor = np.asarray(anchor, dtype=float)
    B = np.asarray(frame, dtype=float)
    Binv = np.linalg.inv(B)
    mismatch = displacement(anchor, gmap.forward(disk.anchor))
    if np.max(np.abs(mismatch)) > 1e-8:
        raise ChartError("disk anchor does not map to the new anchor")

    def image(s):
        s = np.atleast_1d(s)
        o = gmap.step_offset(np.broadcast_to(disk.anchor, (len(s), 2)), disk.offsets(s)) + mismatch
        return o @ Binv.T

    def dimage(s):
        s = np.atleast_1d(s)
        J = gmap.derivative(disk.anchor + disk.offsets(s))
        return np.einsum("ij,njk,nk->ni", Binv, J, disk.tangents(s))

    ends = image(np.array([disk.lo, disk.hi]))
    flip = ends[0, 0] > ends[1, 0]
    lo_img, hi_img = sorted(ends[:, 0])
    if clip:
        v = dimage(0.0)[0]
        sp = float(np.linalg.norm(B[:, 0] + (v[1] / v[0]) * B[:, 1]))
        lo, hi = max(lo_img, -r / sp), min(hi_img, r / sp)
    else:
        lo, hi = lo_img, hi_img
    if not lo < 0 < hi:
        raise ChartError("pushed disk does not cross the anchor fiber")
    for attempt in range(3):
        sig = ChebGraph.nodes(lo, hi, deg)
        # invert the base coordinate of the image curve by Newton, from linear interpolation
        xs = ends[::-1, 0] if flip else ends[:, 0]
        ss = np.array([disk.hi, disk.lo]) if flip else np.array([disk.lo, disk.hi])
        s = np.interp(sig, xs, ss)
        for _ in range(60):
            c = image(s)
            dc = dimage(s)[:, 0]
            step = (c[:, 0] - sig) / dc
            s = np.clip(s - step, disk.lo, disk.hi)
            if np.max(np.abs(step)) <= NEWTON_TOL * max(1.0, disk.hi - disk.lo):
                break
        else:
            raise ConvergenceError("forward graph-transform Newton did not converge")
        c = image(s)
        g = ChebGraph.from_values(lo, hi, c[:, 1])
        out = AdmissibleDisk(anchor, B, disk.base, g, 0.0, r if clip else None)
        if not clip:
            break
        a = out.arclength(np.array([lo, hi]))
        new_lo = lo if lo == lo_img else lo * r / -a[0]
        new_hi = hi if hi == hi_img else hi * r / a[1]
        new_lo, new_hi = max(lo_img, new_lo), min(hi_img, new_hi)
        if abs(new_lo - lo) <= 1e-4 * abs(lo) and abs(new_hi - hi) <= 1e-4 * abs(hi):
            break
        lo, hi = new_lo, new_hi
    return out


def push_point(disk: AdmissibleDisk, next_disk: AdmissibleDisk, hmap: DiscreteMap, s):
    """Image of disk points (base coordinates s) under h, in next_disk coordinates.

    Returns (sigma, defect): base coordinates on next_disk and the fiber
    mismatch u' - phi_next(sigma) (zero for an exactly invariant family).
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    mismatch = displacement(next_disk.anchor, hmap.forward(disk.anchor))
    off = hmap.step_offset(np.broadcast_to(disk.anchor, (len(s), 2)), disk.offsets(s)) + mismatch
    c = next_disk.coords(off)
    return c[:, 0], c[:, 1] - next_disk.graph(c[:, 0])


# ---------------------------------------------------------------------------
# chart constants

def chart_radius(fmap: DiscreteMap, s: Splitting, sample_points, epsilon, cap=0.1, n_dir=8, iters=30, rtol=1e-6):
    """Largest r (<= cap) keeping the frame-norm distortions within e^{eps/4} over r-balls of the sample."""
    pts = np.asarray(sample_points, dtype=float)
    inv = reverse(fmap)
    ang = 2 * np.pi * np.arange(n_dir) / n_dir
    dirs = np.column_stack([np.cos(ang), np.sin(ang)])

    def lognorms(P):
        fr = s.frames(P)
        E, F = fr[0], fr[-1]
        J = inv.derivative(P)
        return (np.log(np.linalg.norm((J @ E)[..., 0], axis=-1)),
                np.log(np.linalg.norm((J @ F)[..., 0], axis=-1)))

    e0, f0 = lognorms(pts)

    def ok(r):
        for frac in (0.5, 1.0):
            Q = wrap(pts[:, None, :] + frac * r * dirs[None, :, :]).reshape(-1, 2)
            e1, f1 = lognorms(Q)
            de = np.abs(e1.reshape(len(pts), n_dir) - e0[:, None])
            df = np.abs(f1.reshape(len(pts), n_dir) - f0[:, None])
            if max(de.max(), df.max()) >= epsilon / 4:
                return False
        return True

    if ok(cap):
        return cap
    lo, hi = 0.0, cap
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
        if lo > 0 and hi - lo <= rtol * lo:
            break
    return lo


def theta_one(fmap: DiscreteMap, s: Splitting, sample_points, epsilon, t, kmax=40):
    """Largest 2^-k such that tilting F by t^2 2^-k towards E keeps m(Dg^{-1}|F) within e^{-eps/4}."""
    pts = np.asarray(sample_points, dtype=float)
    inv = reverse(fmap)
    fr = s.frames(pts)
    E, F = fr[0][..., 0], fr[-1][..., 0]
    J = inv.derivative(pts)
    base = np.linalg.norm(np.einsum("nij,nj->ni", J, F), axis=-1)
    for k in range(1, kmax):
        th = 2.0 ** -k
        worst = np.inf
        for sign in (1, -1):
            v = F + sign * t * t * th * E
            ratio = np.linalg.norm(np.einsum("nij,nj->ni", J, v), axis=-1) / np.linalg.norm(v, axis=-1) / base
            worst = min(worst, ratio.min())
        if worst > math.exp(-epsilon / 4):
            return th
    raise HypothesisError("no admissible theta_1 on the grid")


def block_constants(exponents, epsilon):
    chiE, chiF = exponents
    eta1 = math.exp(chiF - chiE + 2 * epsilon)
    return {"eta1": eta1, "eta2": eta1 * math.exp(epsilon)}


# ---------------------------------------------------------------------------
# chains along orbit segments

@dataclass
class ManifoldCertificate:
    rates: list  # measured log contraction per audited k (max over pairs of log ratio / k)
    bound: dict  # envelope parameters
    tangency: float
    convergence: list  # Cauchy gaps
    audit_pass: bool
    radius: float
    slopes: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


class OrbitFrames:
    """Anchors x_0..x_n of a g-orbit with the splitting frames and per-step log norms."""

    def __init__(self, gmap: DiscreteMap, s: Splitting, points, frames=None):
        self.g = gmap
        self.points = np.asarray(points, dtype=float)
        fr = s.frames_on_orbit(gmap, self.points) if frames is None else frames
        self.E = fr[0][..., 0]
        self.F = fr[-1][..., 0]
        J = gmap.derivative(self.points[:-1]) if len(self.points) > 1 else np.empty((0, 2, 2))
        self.log_mE = np.log(np.linalg.norm(np.einsum("nij,nj->ni", J, self.E[:-1]), axis=-1))
        self.log_nF = np.log(np.linalg.norm(np.einsum("nij,nj->ni", J, self.F[:-1]), axis=-1))

    def __len__(self):
        return len(self.points)

    def frame(self, k, base):
        return np.column_stack([self.F[k], self.E[k]]) if base == "F" else np.column_stack([self.E[k], self.F[k]])

    def sub(self, lo, hi):
        out = object.__new__(OrbitFrames)
        out.g = self.g
        out.points = self.points[lo:hi + 1]
        out.E, out.F = self.E[lo:hi + 1], self.F[lo:hi + 1]
        out.log_mE, out.log_nF = self.log_mE[lo:hi], self.log_nF[lo:hi]
        return out


def stable_chain(orb: OrbitFrames, final_disk: AdmissibleDisk, r, deg=DEGREE, first_clip=None):
    """Pull final_disk (anchored at the last orbit point) back to every earlier orbit point.

    Returns the disks D_0..D_n with D_n = final_disk and D_k = g^{-1}(D_{k+1}) clipped to radius r.
    """
    n = len(orb) - 1
    disks = [None] * (n + 1)
    disks[n] = final_disk
    for k in range(n - 1, -1, -1):
        disks[k] = pullback(disks[k + 1], orb.g, orb.points[k], orb.frame(k, "F"), r, deg)
    return disks


def unstable_chain(orb: OrbitFrames, first_disk: AdmissibleDisk, r, deg=DEGREE):
    """Push first_disk (anchored at the first orbit point) forward: D_k = g(D_{k-1}) clipped to r."""
    n = len(orb) - 1
    inv = reverse(orb.g)
    disks = [None] * (n + 1)
    disks[0] = first_disk
    for k in range(1, n + 1):
        disks[k] = pullback(disks[k - 1], inv, orb.points[k], orb.frame(k, "E"), r, deg)
    return disks


def averf_hypotheses(orb: OrbitFrames, exponents, epsilon, t):
    """Residuals of the two orbit-segment hypotheses for pulling F-disks back along orb (>= 0 passes)."""
    chiE, chiF = exponents
    logt = math.log(t)
    dom = (orb.log_nF - orb.log_mE)[::-1]  # steps n-1, n-2, ...
    k = np.arange(1, len(dom) + 1)
    r1 = 2 * logt + k * (chiF - chiE + 2 * epsilon) - np.cumsum(dom)
    r2 = logt + k * (chiF + epsilon) - np.cumsum(orb.log_nF)
    return float(np.min(r1, initial=np.inf)), float(np.min(r2, initial=np.inf))


def avere_hypotheses(orb: OrbitFrames, exponents, epsilon, t):
    chiE, chiF = exponents
    logt = math.log(t)
    dom = orb.log_nF - orb.log_mE
    k = np.arange(1, len(dom) + 1)
    r1 = 2 * logt + k * (chiF - chiE + 2 * epsilon) - np.cumsum(dom)
    r2 = np.cumsum(orb.log_mE[::-1]) - (k * (chiE - epsilon) - logt)
    return float(np.min(r1, initial=np.inf)), float(np.min(r2, initial=np.inf))


def local_cone_widths(disk: AdmissibleDisk, s: Splitting, n=None):
    """Cone width of the disk's tangent lines measured in the splitting at each disk point."""
    n = n or OVERSAMPLE * disk.graph.degree + 1
    ss = np.linspace(disk.lo, disk.hi, n)
    P = disk.points(ss)
    fr = s.frames(P)
    E, F = fr[0][..., 0], fr[-1][..., 0]
    T = disk.tangents(ss)
    M = np.stack([E, F], axis=-1)
    c = np.linalg.solve(M, T[..., None])[..., 0]
    if disk.base == "F":
        return ss, np.abs(c[:, 0]) / np.abs(c[:, 1])
    return ss, np.abs(c[:, 1]) / np.abs(c[:, 0])


def predicted_widths(disk_next: AdmissibleDisk, hmap: DiscreteMap, s: Splitting, sigma):
    """Width after one pullback predicted pointwise: (|Dh^{-1}|E| / m(Dh^{-1}|F)) * old width at h(y)."""
    P = disk_next.points(sigma)
    fr = s.frames(P)
    E, F = fr[0][..., 0], fr[-1][..., 0]
    inv = reverse(hmap)
    J = inv.derivative(P)
    nE = np.linalg.norm(np.einsum("nij,nj->ni", J, E), axis=-1)
    nF = np.linalg.norm(np.einsum("nij,nj->ni", J, F), axis=-1)
    T = disk_next.tangents(sigma)
    c = np.linalg.solve(np.stack([E, F], axis=-1), T[..., None])[..., 0]
    if disk_next.base == "F":
        return (nE / nF) * np.abs(c[:, 0]) / np.abs(c[:, 1])
    return (nF / nE) * np.abs(c[:, 1]) / np.abs(c[:, 0])


def family_orbit(disks, hmap: DiscreteMap, s0):
    """Track base coordinates of points of disks[0] through the invariant family.

    Returns (offsets, max absolute projection defect): offsets[k] are the
    offsets from disks[k].anchor of the images of the starting points.
    """
    s = np.atleast_1d(np.asarray(s0, dtype=float))
    offs = [disks[0].offsets(s)]
    worst = 0.0
    for k in range(len(disks) - 1):
        sig, defect = push_point(disks[k], disks[k + 1], hmap, s)
        worst = max(worst, float(np.max(np.abs(defect))))
        s = np.clip(sig, disks[k + 1].lo, disks[k + 1].hi)
        offs.append(disks[k + 1].offsets(s))
    return offs, worst


def contraction_audit(disks, hmap, t, rate, pairs, kmax=None):
    """Check |h^k y - h^k z| <= t e^{rate k} |y - z| for sampled pairs tracked through the family."""
    kmax = len(disks) - 1 if kmax is None else min(kmax, len(disks) - 1)
    s1, s2 = np.asarray(pairs, dtype=float).T
    offs, defect = family_orbit(disks[: kmax + 1], hmap, np.concatenate([s1, s2]))
    m = len(s1)
    d = np.array([np.linalg.norm(o[:m] - o[m:], axis=-1) for o in offs])  # (k, pairs)
    ks = np.arange(kmax + 1)
    env = t * np.exp(rate * ks)[:, None] * d[0][None, :]
    ok = bool(np.all(d <= env * (1 + 1e-9) + 1e-300))
    with np.errstate(divide="ignore"):
        rates = [float(np.max(np.log(d[k] / d[0]) / k)) if k else 0.0 for k in ks]
    return ok, rates, d, defect


def pull_subdisk(D: AdmissibleDisk, orb: OrbitFrames, t, epsilon, r, exponents=None, check=True,
                 n_pairs=20, rng=None, theta1=None):
    """Sub-disk of g^{-n}(D) of radius r/t about orb.points[0], with its certificate."""
    n = len(orb) - 1
    notes = {}
    if check and exponents is not None and n > 0:
        h1, h2 = averf_hypotheses(orb, exponents, epsilon, t)
        notes["hypothesis_residuals"] = [h1, h2]
        if min(h1, h2) < -1e-10:
            raise HypothesisError(f"orbit segment violates the block hypotheses (residuals {h1:.3g}, {h2:.3g})")
    if theta1 is not None and D.slope > theta1 * (1 + 1e-9):
        raise HypothesisError("initial disk is not tangent to the theta_1 cone")
    if n == 0:
        out = D.clip(r / t)
        cert = ManifoldCertificate([0.0], {"t": t}, 0.0, [], True, out.radius)
        return out, cert, [out]
    disks = [None] * (n + 1)
    disks[n] = D.clip(r) if D.radius > r else D
    for k in range(n - 1, -1, -1):
        disks[k] = pullback(disks[k + 1], orb.g, orb.points[k], orb.frame(k, "F"), r)
        if disks[k].radius <= 0:
            raise ChartError(f"radius collapsed at step {k}")
    out = disks[0].clip(r / t)
    disks[0] = out
    rate = (exponents[1] + 2 * epsilon) if exponents is not None else 0.0
    rng = np.random.default_rng(0) if rng is None else rng
    pairs = rng.uniform(out.lo, out.hi, size=(n_pairs, 2))
    ok, rates, _, defect = contraction_audit(disks, orb.g, t, rate, pairs)
    contained = max(float(np.max(np.linalg.norm(d.offsets(np.linspace(d.lo, d.hi, 33)), axis=-1))) for d in disks)
    notes.update({"max_extent": contained, "family_defect": defect})
    cert = ManifoldCertificate(rates, {"t": t, "rate": rate}, 0.0, [], ok and contained <= r * (1 + 1e-6),
                               out.radius, [d.slope for d in disks], notes)
    return out, cert, disks


def stable_disk_family(orb: OrbitFrames, r, start, stop, extra=30, init_radius=None):
    """Invariant F-disk family at orbit indices start..stop, pulled back from index stop+extra."""
    end = min(stop + extra, len(orb) - 1)
    init_radius = r * 1.01 if init_radius is None else init_radius
    D = straight_disk(orb.points[end], orb.F[end], orb.E[end], "F", init_radius)
    disks = [None] * (end - start + 1)
    disks[-1] = D
    for k in range(end - 1, start - 1, -1):
        disks[k - start] = pullback(disks[k - start + 1], orb.g, orb.points[k], orb.frame(k, "F"), r)
    return disks[: stop - start + 1]


def tangency(disk: AdmissibleDisk, s: Splitting):
    """Sine of the angle between the disk tangent at its foot and the target bundle at the foot."""
    P = disk.center
    fr = s.frames(P)
    target = fr[-1][:, 0] if disk.base == "F" else fr[0][:, 0]
    v = disk.tangents(0.0)
    v = v / np.linalg.norm(v)
    return float(abs(v[0] * target[1] - v[1] * target[0]))


def local_stable_manifold(orb: OrbitFrames, returns, t, epsilon, r, s: Splitting, exponents,
                          j_max=40, cauchy_tol=1e-13, audit_k=50, n_pairs=20, radius=None, rng=None):
    """W^F_loc at orb.points[0]: pull straight F-segments back from successive block returns.

    `returns` are orbit indices (> 0) of later block points. The iteration stops when the
    C^0 + slope gap between successive disks drops below cauchy_tol.
    """
    target_radius = r / t if radius is None else radius
    if target_radius == 0:
        disk = AdmissibleDisk(orb.points[0], orb.frame(0, "F"), "F", ChebGraph.zero(0.0, 0.0), 0.0, 0.0)
        return disk, ManifoldCertificate([0.0], {"t": t}, 0.0, [0.0], True, 0.0)
    prev = straight_disk(orb.points[0], orb.F[0], orb.E[0], "F", target_radius)
    gaps = []
    disk = prev
    used = 0
    for n in list(returns)[:j_max]:
        if n >= len(orb):
            break
        D = straight_disk(orb.points[n], orb.F[n], orb.E[n], "F", r * math.exp(epsilon))
        cur = D
        for k in range(n - 1, -1, -1):
            cur = pullback(cur, orb.g, orb.points[k], orb.frame(k, "F"), r)
        cur = cur.clip(target_radius)
        c0, c1 = c0_distance(prev, cur)
        gaps.append(c0 + c1)
        prev = disk = cur
        used += 1
        if gaps[-1] < cauchy_tol:
            break
    else:
        if not gaps or gaps[-1] >= cauchy_tol:
            raise ConvergenceError(f"stable disk did not converge: gaps {gaps}")
    # invariant family for the contraction audit
    kmax = min(audit_k, len(orb) - 2)
    fam = stable_disk_family(orb, r, 0, kmax, extra=max(30, int(40 / max(1e-3, exponents[0] - exponents[1]))))
    fam[0] = disk
    rng = np.random.default_rng(0) if rng is None else rng
    pairs = rng.uniform(disk.lo, disk.hi, size=(n_pairs, 2))
    rate = exponents[1] + 2 * epsilon
    ok, rates, dists, defect = contraction_audit(fam, orb.g, t, rate, pairs, kmax)
    tan = tangency(disk, s)
    cert = ManifoldCertificate(rates, {"t": t, "rate": rate, "k_max": kmax}, tan, gaps, ok, disk.radius,
                               [], {"family_defect": defect, "iterates": used})
    cert.family = fam
    cert.pairs = pairs
    cert.distances = dists
    return disk, cert


def local_unstable_manifold(orb: OrbitFrames, back_returns, t, epsilon, r, s: Splitting, exponents,
                            j_max=40, cauchy_tol=1e-13, audit_k=50, n_pairs=20, radius=None, rng=None):
    """W^E_loc at the last orbit point, pushing straight E-segments forward from earlier block points.

    `back_returns` are positive lags n such that orb.points[-1 - n] is a block point.
    Implemented as the stable construction for the inverse map on the reversed orbit.
    """
    rev = reverse(orb.g)
    robj = object.__new__(OrbitFrames)
    robj.g = rev
    robj.points = orb.points[::-1].copy()
    robj.E, robj.F = orb.F[::-1].copy(), orb.E[::-1].copy()  # roles swap under time reversal
    robj.log_mE = -orb.log_nF[::-1]
    robj.log_nF = -orb.log_mE[::-1]
    rexp = (-exponents[1], -exponents[0])
    disk, cert = local_stable_manifold(robj, back_returns, t, epsilon, r, _SwappedSplitting(s), rexp,
                                       j_max, cauchy_tol, audit_k, n_pairs, radius, rng)
    disk.base = "E"
    for d in getattr(cert, "family", []):
        d.base = "E"
    return disk, cert


class _SwappedSplitting(Splitting):
    def __init__(self, s):
        self.s = s
        self.dims = tuple(reversed(s.dims))

    def frames(self, x):
        return list(reversed(self.s.frames(x)))


def intersect_disks(dE: AdmissibleDisk, dF: AdmissibleDisk, tol=1e-12, return_offsets=False):
    """The unique point of dE ∩ dF, by Newton on the two graph parameters."""
    shift = displacement(dE.anchor, dF.anchor)  # dF.anchor - dE.anchor
    if np.linalg.norm(shift) > 0.25:
        raise ChartError("no intersection: disks are not in a common chart")
    # initial guess from the straight approximations
    M0 = np.column_stack([dE.frame[:, 0], -dF.frame[:, 0]])
    rhs = shift + dF.offsets(0.0) - dE.offsets(0.0)
    s, sig = np.linalg.solve(M0, rhs)
    res_norm = np.inf
    for _ in range(60):
        res = dE.offsets(s) - dF.offsets(sig) - shift
        res_norm = float(np.max(np.abs(res)))
        M = np.column_stack([dE.tangents(s), -dF.tangents(sig)])
        if abs(np.linalg.det(M)) < 1e-12:
            raise ConvergenceError("disks are not transverse")
        step = np.linalg.solve(M, -res)
        s, sig = s + step[0], sig + step[1]
        if np.max(np.abs(step)) < 1e-17:
            break
    res = dE.offsets(s) - dF.offsets(sig) - shift
    res_norm = float(np.max(np.abs(res)))
    if res_norm > tol:
        raise ConvergenceError(f"intersection residual {res_norm:.2e}")
    slack = 1e-12
    if not (dE.lo - slack <= s <= dE.hi + slack and dF.lo - slack <= sig <= dF.hi + slack):
        raise ChartError("no intersection within both disks")
    offE = dE.offsets(s)
    pt = wrap(dE.anchor + offE)
    if return_offsets:
        return pt, offE, dF.offsets(sig), (float(s), float(sig))
    return pt


def distance_to_disk(disk: AdmissibleDisk, offsets):
    """Fiber-direction distance of points (given as offsets from disk.anchor) to the disk."""
    c = disk.coords(offsets)
    inside = (c[:, 0] >= disk.lo) & (c[:, 0] <= disk.hi)
    d = np.abs(c[:, 1] - disk.graph(np.clip(c[:, 0], disk.lo, disk.hi))) * np.linalg.norm(disk.frame[:, 1])
    return np.where(inside, d, np.inf)


def trap_check(orb: OrbitFrames, B_offsets, tau, returns, t, epsilon, r, s: Splitting, exponents,
               budget=None, tol=1e-8):
    """First block return n_K with g^{n_K}(B) inside the local stable disk at g^{n_K}(x).

    B is given as offsets from x = orb.points[0]. Images are tracked as offsets along the orbit.
    """
    B = np.atleast_2d(np.asarray(B_offsets, dtype=float))
    budget = len(orb) - 1 if budget is None else min(budget, len(orb) - 1)
    offs = [B]
    o = B
    for k in range(budget):
        o = orb.g.step_offset(np.broadcast_to(orb.points[k], o.shape), o)
        offs.append(o)
    diam = np.array([_diam(np.vstack([np.zeros((1, 2)), q])) for q in offs])
    with np.errstate(divide="ignore"):
        seq = np.exp(-tau * np.arange(budget + 1)) * diam
    if diam[0] > 0 and np.any(np.diff(seq) > 1e-15 * seq[:-1] + 1e-300):
        raise HypothesisError("precondition failed: e^{-tau n} diam(g^n B) is not decreasing")
    for n in returns:
        if n > budget:
            break
        sub = orb.sub(n, len(orb) - 1)
        later = [m - n for m in returns if m > n]
        disk, _ = local_stable_manifold(sub, later, t, epsilon, r, s, exponents, audit_k=1, n_pairs=2)
        if np.all(distance_to_disk(disk, offs[n]) <= tol):
            return n
    raise ConvergenceError("budget exhausted before B was trapped")


def _diam(P):
    d = P[:, None, :] - P[None, :, :]
    return float(np.max(np.linalg.norm(d, axis=-1)))


def polyline(disk: AdmissibleDisk, n=64):
    s, P = disk.sample(n)
    return [{"s": float(a), "x": float(p[0]), "y": float(p[1])} for a, p in zip(s, P)]
