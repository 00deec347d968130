"""Orbit segments with the derivative cocycle along them; restricted norms feed the exponent estimates."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .systems import ORBIT_CAP, DiscreteMap, OrbitCapError, Splitting, as_point


class FrameCollapse(RuntimeError):
    pass


@dataclass
class OrbitSegment:
    fmap: DiscreteMap
    points: np.ndarray  # (n+1, d)
    jacobians: np.ndarray  # (n, d, d), Df at points[:-1]

    @property
    def base(self):
        return self.points[0]

    @property
    def length(self):
        return len(self.points) - 1


def orbit(fmap: DiscreteMap, x0, n: int, cap: int = ORBIT_CAP) -> OrbitSegment:
    n = int(n)
    if n < 0:
        raise ValueError("n must be nonnegative")
    if n > cap:
        raise OrbitCapError(f"n={n} exceeds orbit cap {cap}")
    pts = fmap.orbit_points(as_point(x0, fmap.dim), n)
    jac = fmap.derivative(pts[:-1]) if n else np.empty((0, fmap.dim, fmap.dim))
    return OrbitSegment(fmap, pts, jac)


def _product_logsv(mats):
    """Log singular values (descending) of mats[-1] @ ... @ mats[0], by QR accumulation."""
    k = mats.shape[-1]
    if k == 1:
        a = np.abs(mats[:, 0, 0])
        if np.any(a == 0):
            raise FrameCollapse("restricted derivative vanished")
        s = float(np.sum(np.log(a)))
        return np.array([s])
    P = np.eye(k)
    logscale = 0.0
    for M in mats:
        P = M @ P
        c = np.max(np.abs(P))
        if c == 0 or not np.isfinite(c):
            raise FrameCollapse("restricted product degenerate")
        P /= c
        logscale += np.log(c)
    sv = np.linalg.svd(P, compute_uv=False)
    if sv[-1] == 0:
        raise FrameCollapse("restricted product singular")
    return np.log(sv) + logscale


class CocycleStats:
    """Per-step restricted derivative data along an orbit segment.

    ``restricted[i]`` has shape (n, k_i, k_i): Df in orthonormal frame
    coordinates, E_i(x_k) -> E_i(x_{k+1}). For one-dimensional bundles the
    window norms are read off prefix sums of log|Df|E|.
    """

    def __init__(self, seg: OrbitSegment, s: Splitting, frames=None):
        self.seg = seg
        self.splitting = s
        self.dims = s.dims
        if frames is None:
            frames = s.frames_on_orbit(seg.fmap, seg.points) if seg.length else s.frames(seg.points)
        self.frames = frames
        n = seg.length
        self.restricted = []
        self.lognorm = np.zeros((n, len(s.dims)))
        self.logconorm = np.zeros((n, len(s.dims)))
        for i, Fr in enumerate(frames):
            pushed = seg.jacobians @ Fr[:-1]
            if Fr.shape[-1] == 1:
                nrm = np.linalg.norm(pushed[..., 0], axis=-1)
                if np.any(nrm == 0):
                    raise FrameCollapse("restricted derivative vanished")
                self.lognorm[:, i] = self.logconorm[:, i] = np.log(nrm)
                self.restricted.append(nrm[:, None, None])
            else:
                M = np.swapaxes(Fr[1:], -1, -2) @ pushed
                sv = np.linalg.svd(M, compute_uv=False)
                if np.any(sv[:, -1] <= 0):
                    raise FrameCollapse("restricted derivative singular")
                self.lognorm[:, i] = np.log(sv[:, 0])
                self.logconorm[:, i] = np.log(sv[:, -1])
                self.restricted.append(M)
        self._prefix = np.vstack([np.zeros((1, len(s.dims))), np.cumsum(self.lognorm, axis=0)])

    @property
    def length(self):
        return self.seg.length

    def window(self, bundle: int, k: int, j: int):
        """(log norm, log conorm) of the j-step restricted product starting at step k."""
        if k < 0 or j < 0 or k + j > self.length:
            raise IndexError(f"window [{k}, {k + j}) outside segment of length {self.length}")
        if j == 0:
            return 0.0, 0.0
        if self.dims[bundle] == 1:
            v = float(self._prefix[k + j, bundle] - self._prefix[k, bundle])
            return v, v
        lsv = _product_logsv(self.restricted[bundle][k: k + j])
        return float(lsv[0]), float(lsv[-1])

    def power_series(self, bundle: int, N: int):
        """Per-step (log norm, log conorm) of Df^N|E_i along x_0, x_N, x_2N, ..."""
        m = self.length // N
        if self.dims[bundle] == 1:
            v = np.diff(self._prefix[: m * N + 1: N, bundle])
            return v, v.copy()
        if N == 1:
            return self.lognorm[:m, bundle].copy(), self.logconorm[:m, bundle].copy()
        out = np.array([self.window(bundle, q * N, N) for q in range(m)]).reshape(m, 2)
        return out[:, 0], out[:, 1]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "bundle", "lognorm", "logconorm"])
            for k in range(self.length):
                for i in range(len(self.dims)):
                    w.writerow([k, i, repr(float(self.lognorm[k, i])), repr(float(self.logconorm[k, i]))])


def restricted_norms(seg: OrbitSegment, s: Splitting, bundle: int, start: int, steps: int, stats=None):
    """Log norm and log co-norm of Df^steps restricted to bundle at points[start]."""
    if stats is None:
        stats = CocycleStats(seg, s)
    return stats.window(bundle, start, steps)


def restricted_norms_pushed(seg: OrbitSegment, frame, start: int, steps: int):
    """Same quantity by pushing a frame with QR re-orthonormalization (no splitting needed
    along the way). Only stable for the most expanding bundle or short windows."""
    Q = np.asarray(frame, dtype=float)
    k = Q.shape[-1]
    R = np.eye(k)
    logscale = 0.0
    for J in seg.jacobians[start: start + steps]:
        Q, r = np.linalg.qr(J @ Q)
        R = r @ R
        c = np.max(np.abs(R))
        R /= c
        logscale += np.log(c)
    if steps == 0:
        return 0.0, 0.0
    sv = np.linalg.svd(R, compute_uv=False)
    return float(np.log(sv[0]) + logscale), float(np.log(sv[-1]) + logscale)


@dataclass
class LyapunovEstimate:
    chi_minus: np.ndarray  # per bundle, from co-norms
    chi_plus: np.ndarray  # per bundle, from norms
    trace_steps: np.ndarray
    trace_plus: np.ndarray  # (len(trace_steps), bundles) running averages
    trace_minus: np.ndarray
    oscillation: np.ndarray  # per bundle, spread of running averages over the last decade
    n: int

    def as_dict(self):
        return {
            "n": self.n,
            "chi_minus": [float(v) for v in self.chi_minus],
            "chi_plus": [float(v) for v in self.chi_plus],
            "oscillation": [float(v) for v in self.oscillation],
        }


def lyapunov_estimate(fmap: DiscreteMap, s: Splitting, x0, n: int, stats=None, n_trace: int = 200):
    if n < 1000:
        raise ValueError("lyapunov_estimate needs n >= 1000")
    if stats is None:
        stats = CocycleStats(orbit(fmap, x0, n), s)
    ell = len(s.dims)
    plus = np.empty(ell)
    minus = np.empty(ell)
    for i in range(ell):
        ln, lc = stats.window(i, 0, n)
        plus[i], minus[i] = ln / n, lc / n
    steps = np.unique(np.geomspace(1, n, n_trace).astype(int))
    tp = np.empty((len(steps), ell))
    tm = np.empty((len(steps), ell))
    for i in range(ell):
        if s.dims[i] == 1:
            tp[:, i] = tm[:, i] = stats._prefix[steps, i] / steps
        else:
            for q, k in enumerate(steps):
                ln, lc = stats.window(i, 0, int(k))
                tp[q, i], tm[q, i] = ln / k, lc / k
    last = steps >= n / 10
    osc = np.maximum(np.ptp(tp[last], axis=0), np.ptp(tm[last], axis=0))
    return LyapunovEstimate(minus, plus, steps, tp, tm, osc, n)
