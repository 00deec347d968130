"""Phase space, torus maps, the map registry and invariant-splitting providers."""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ORBIT_CAP = 50_000_000
NEWTON_TOL = 1e-13
NEWTON_MAXITER = 50


class OrbitCapError(ValueError):
    pass


class SplittingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# torus geometry

def wrap(x):
    """Reduce coordinates into [0, 1)."""
    x = np.asarray(x, dtype=float)
    r = x - np.floor(x)
    return np.where(r >= 1.0, 0.0, r)


def displacement(x, y):
    """Shortest lattice-translate displacement from x to y (components in [-1/2, 1/2))."""
    d = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    return d - np.floor(d + 0.5)


def torus_distance(x, y):
    return np.linalg.norm(displacement(x, y), axis=-1)


def as_point(coords, dim=None) -> np.ndarray:
    p = np.asarray(coords, dtype=float).reshape(-1)
    if dim is not None and p.size != dim:
        raise ValueError(f"expected {dim} coordinates, got {p.size}")
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite coordinates")
    return wrap(p)


# ---------------------------------------------------------------------------
# maps

class DiscreteMap(ABC):
    """Invertible C^1 map of the flat d-torus.

    All point methods broadcast over leading axes; points have shape (..., d).
    """

    dim: int
    descriptor: str
    params: dict

    @abstractmethod
    def forward(self, x): ...

    @abstractmethod
    def inverse(self, x): ...

    @abstractmethod
    def derivative(self, x): ...

    def step_offset(self, base, offset):
        """Lifted difference f(base + offset) - f(base).

        Subclasses should override with a cancellation-free formula; this
        fallback is only accurate for offsets well above rounding level.
        """
        base = np.asarray(base, dtype=float)
        return displacement(self.forward(base), self.forward(base + offset))

    def inverse_step_offset(self, base, offset, pre=None):
        """Lifted difference f^{-1}(base + offset) - f^{-1}(base), by Newton on step_offset."""
        base = np.asarray(base, dtype=float)
        offset = np.asarray(offset, dtype=float)
        p = self.inverse(base) if pre is None else np.asarray(pre, dtype=float)
        J = self.derivative(p)
        o = np.linalg.solve(J, offset[..., None])[..., 0]
        scale = np.maximum(np.linalg.norm(offset, axis=-1, keepdims=True), 1e-300)
        for _ in range(NEWTON_MAXITER):
            res = self.step_offset(p, o) - offset
            if np.all(np.abs(res) <= 4e-16 * scale):
                break
            Jo = self.derivative(p + o)
            o = o - np.linalg.solve(Jo, res[..., None])[..., 0]
        return o

    def orbit_points(self, x0, n: int) -> np.ndarray:
        pts = np.empty((n + 1, self.dim))
        pts[0] = as_point(x0, self.dim)
        for k in range(n):
            pts[k + 1] = self.forward(pts[k])
        return pts

    def backward_points(self, x0, n: int) -> np.ndarray:
        """Points f^{-k}(x0), k = 0..n."""
        pts = np.empty((n + 1, self.dim))
        pts[0] = as_point(x0, self.dim)
        for k in range(n):
            pts[k + 1] = self.inverse(pts[k])
        return pts

    def linear_part(self):
        return None

    def __repr__(self):
        return f"<{type(self).__name__} {self.descriptor}>"


_KINDS = ("sin", "cos")


@dataclass(frozen=True)
class TrigTerm:
    """Perturbation term coef * kind(2 pi k.x) added to coordinate `component`."""

    component: int
    coef: float
    freq: tuple
    kind: str = "sin"

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"term kind must be one of {_KINDS}")


class TorusMap(DiscreteMap):
    """f(x) = A x + sum of trigonometric terms, mod 1, with A unimodular integer."""

    def __init__(self, matrix, terms=(), descriptor="torus-map", params=None):
        A = np.asarray(matrix, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("matrix must be square")
        if not np.allclose(A, np.round(A)):
            raise ValueError("linear part must have integer entries")
        if abs(abs(round(np.linalg.det(A))) - 1) > 0 or abs(abs(np.linalg.det(A)) - 1) > 1e-9:
            raise ValueError("linear part must be unimodular (det = +-1)")
        self.A = np.round(A)
        self.Ainv = np.round(np.linalg.inv(self.A))
        self.dim = A.shape[0]
        self.terms = tuple(terms)
        for t in self.terms:
            if not 0 <= t.component < self.dim or len(t.freq) != self.dim:
                raise ValueError(f"bad term {t}")
        self.descriptor = descriptor
        self.params = dict(params or {})
        if self.terms:
            self._comp = np.array([t.component for t in self.terms])
            self._coef = np.array([t.coef for t in self.terms])
            self._freq = 2 * np.pi * np.array([t.freq for t in self.terms], dtype=float)
            self._is_sin = np.array([t.kind == "sin" for t in self.terms])

    def linear_part(self):
        return self.A

    # phase of each term, shape (..., T)
    def _phase(self, x):
        return x @ self._freq.T

    def _trig(self, ph):
        return np.where(self._is_sin, np.sin(ph), np.cos(ph))

    def _dtrig(self, ph):
        return np.where(self._is_sin, np.cos(ph), -np.sin(ph))

    def _perturbation(self, x):
        out = np.zeros(x.shape)
        if self.terms:
            vals = self._coef * self._trig(self._phase(x))
            for j, c in enumerate(self._comp):
                out[..., c] += vals[..., j]
        return out

    def lifted(self, x):
        x = np.asarray(x, dtype=float)
        return x @ self.A.T + self._perturbation(x)

    def forward(self, x):
        return wrap(self.lifted(x))

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        J = np.broadcast_to(self.A, x.shape[:-1] + self.A.shape).copy()
        if self.terms:
            dv = self._coef * self._dtrig(self._phase(x))
            for j, c in enumerate(self._comp):
                J[..., c, :] += dv[..., j, None] * self._freq[j]
        return J

    def step_offset(self, base, offset):
        base = np.asarray(base, dtype=float)
        offset = np.asarray(offset, dtype=float)
        out = offset @ self.A.T
        if self.terms:
            ph = self._phase(base)
            h = offset @ self._freq.T
            s = np.sin(0.5 * h)
            mid = ph + 0.5 * h
            # sin(a+h)-sin(a) = 2 cos(a+h/2) sin(h/2); cos(a+h)-cos(a) = -2 sin(a+h/2) sin(h/2)
            diff = np.where(self._is_sin, 2 * np.cos(mid) * s, -2 * np.sin(mid) * s)
            vals = self._coef * diff
            out = out + 0.0
            for j, c in enumerate(self._comp):
                out[..., c] += vals[..., j]
        return out

    def inverse(self, y):
        y = wrap(y)
        x = wrap(y @ self.Ainv.T)
        if not self.terms:
            return x
        for _ in range(NEWTON_MAXITER):
            r = displacement(y, self.lifted(x))
            if np.max(np.abs(r), initial=0.0) <= NEWTON_TOL:
                break
            x = x - np.linalg.solve(self.derivative(x), r[..., None])[..., 0]
        else:
            r = displacement(y, self.lifted(x))
            if np.max(np.abs(r), initial=0.0) > 1e3 * NEWTON_TOL:
                raise RuntimeError("Newton inverse did not converge")
        x = wrap(x)
        # one more correction from the wrapped iterate keeps residuals at rounding level
        r = displacement(y, self.lifted(x))
        return wrap(x - np.linalg.solve(self.derivative(x), r[..., None])[..., 0])

    def orbit_points(self, x0, n: int) -> np.ndarray:
        x0 = as_point(x0, self.dim)
        if self.dim != 2:
            return super().orbit_points(x0, n)
        (a, b), (c, e) = self.A.tolist()
        terms = [(t.component, t.coef, 2 * math.pi * t.freq[0], 2 * math.pi * t.freq[1],
                  math.sin if t.kind == "sin" else math.cos) for t in self.terms]
        xs = [0.0] * (n + 1)
        ys = [0.0] * (n + 1)
        x, y = float(x0[0]), float(x0[1])
        xs[0], ys[0] = x, y
        floor = math.floor
        for k in range(1, n + 1):
            u = a * x + b * y
            v = c * x + e * y
            for comp, coef, k1, k2, fn in terms:
                val = coef * fn(k1 * x + k2 * y)
                if comp == 0:
                    u += val
                else:
                    v += val
            x = u - floor(u)
            y = v - floor(v)
            if x >= 1.0:
                x = 0.0
            if y >= 1.0:
                y = 0.0
            xs[k] = x
            ys[k] = y
        return np.column_stack([xs, ys])

    def backward_points(self, x0, n: int) -> np.ndarray:
        x0 = as_point(x0, self.dim)
        if self.dim != 2 or not self.terms:
            return super().backward_points(x0, n)
        # scalar Newton, same iteration as inverse() without the array overhead
        (a, b), (c, e) = self.A.tolist()
        (ia, ib), (ic, ie) = self.Ainv.tolist()
        terms = [(t.component, t.coef, 2 * math.pi * t.freq[0], 2 * math.pi * t.freq[1], t.kind == "sin")
                 for t in self.terms]
        floor = math.floor

        def lift(x, y):
            u, v = a * x + b * y, c * x + e * y
            j00, j01, j10, j11 = a, b, c, e
            for comp, coef, k1, k2, is_sin in terms:
                ph = k1 * x + k2 * y
                val = coef * (math.sin(ph) if is_sin else math.cos(ph))
                dv = coef * (math.cos(ph) if is_sin else -math.sin(ph))
                if comp == 0:
                    u += val
                    j00 += dv * k1
                    j01 += dv * k2
                else:
                    v += val
                    j10 += dv * k1
                    j11 += dv * k2
            return u, v, j00, j01, j10, j11

        def newton(x, y, p, q):
            u, v, j00, j01, j10, j11 = lift(x, y)
            ru, rv = p - u, q - v
            ru -= floor(ru + 0.5)
            rv -= floor(rv + 0.5)
            det = j00 * j11 - j01 * j10
            return x + (j11 * ru - j01 * rv) / det, y + (j00 * rv - j10 * ru) / det, max(abs(ru), abs(rv))

        pts = np.empty((n + 1, 2))
        pts[0] = x0
        p, q = float(x0[0]), float(x0[1])
        for k in range(1, n + 1):
            x, y = ia * p + ib * q, ic * p + ie * q
            x, y = x - floor(x), y - floor(y)
            for _ in range(NEWTON_MAXITER):
                nx, ny, res = newton(x, y, p, q)
                if res <= NEWTON_TOL:
                    break
                x, y = nx, ny
            else:
                if newton(x, y, p, q)[2] > 1e3 * NEWTON_TOL:
                    raise RuntimeError("Newton inverse did not converge")
            x, y = x - floor(x), y - floor(y)
            x, y, _ = newton(x, y, p, q)
            x, y = x - floor(x), y - floor(y)
            if x >= 1.0:
                x = 0.0
            if y >= 1.0:
                y = 0.0
            pts[k] = p, q = x, y
        return pts


class PowerMap(DiscreteMap):
    """g = f^N."""

    def __init__(self, base: DiscreteMap, N: int):
        if N < 1:
            raise ValueError("power must be >= 1")
        self.base = base
        self.N = int(N)
        self.dim = base.dim
        self.descriptor = f"{base.descriptor}^{self.N}"
        self.params = {"base": base.descriptor, "N": self.N}

    def forward(self, x):
        for _ in range(self.N):
            x = self.base.forward(x)
        return x

    def inverse(self, x):
        for _ in range(self.N):
            x = self.base.inverse(x)
        return x

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        J = np.broadcast_to(np.eye(self.dim), x.shape[:-1] + (self.dim, self.dim)).copy()
        for _ in range(self.N):
            J = self.base.derivative(x) @ J
            x = self.base.forward(x)
        return J

    def step_offset(self, base, offset):
        o = np.asarray(offset, dtype=float)
        x = np.asarray(base, dtype=float)
        for _ in range(self.N):
            o = self.base.step_offset(x, o)
            x = self.base.forward(x)
        return o

    def inverse_step_offset(self, base, offset, pre=None):
        o = np.asarray(offset, dtype=float)
        x = np.asarray(base, dtype=float)
        for _ in range(self.N):
            p = self.base.inverse(x)
            o = self.base.inverse_step_offset(x, o, pre=p)
            x = p
        return o

    def orbit_points(self, x0, n: int) -> np.ndarray:
        return self.base.orbit_points(x0, n * self.N)[:: self.N].copy()

    def linear_part(self):
        A = self.base.linear_part()
        return None if A is None else np.linalg.matrix_power(A, self.N)


class ReversedMap(DiscreteMap):
    """Time reversal: forward and inverse exchanged."""

    def __init__(self, base: DiscreteMap):
        self.base = base
        self.dim = base.dim
        self.descriptor = f"reversed({base.descriptor})"
        self.params = {"base": base.descriptor}

    def forward(self, x):
        return self.base.inverse(x)

    def inverse(self, x):
        return self.base.forward(x)

    def derivative(self, x):
        return np.linalg.inv(self.base.derivative(self.base.inverse(x)))

    def step_offset(self, base, offset):
        return self.base.inverse_step_offset(base, offset)

    def inverse_step_offset(self, base, offset, pre=None):
        return self.base.step_offset(self.base.forward(base) if pre is None else pre, offset)

    def orbit_points(self, x0, n: int) -> np.ndarray:
        return self.base.backward_points(x0, n)

    def backward_points(self, x0, n: int) -> np.ndarray:
        return self.base.orbit_points(x0, n)

    def linear_part(self):
        A = self.base.linear_part()
        return None if A is None else np.round(np.linalg.inv(A))


def reverse(fmap: DiscreteMap) -> DiscreteMap:
    if isinstance(fmap, ReversedMap):
        return fmap.base
    return ReversedMap(fmap)


def evaluate(fmap: DiscreteMap, x, steps: int, cap: int = ORBIT_CAP) -> np.ndarray:
    """Apply the map |steps| times (inverse for negative steps)."""
    if abs(steps) > cap:
        raise OrbitCapError(f"|steps|={abs(steps)} exceeds orbit cap {cap}")
    x = as_point(x, fmap.dim)
    if steps >= 0:
        return fmap.orbit_points(x, steps)[-1]
    return fmap.backward_points(x, -steps)[-1]


# ---------------------------------------------------------------------------
# registry

CAT_MATRIX = ((2.0, 1.0), (1.0, 1.0))


def cat_map() -> TorusMap:
    return TorusMap(CAT_MATRIX, descriptor="cat", params={})


def perturbed_cat(delta: float = 0.1) -> TorusMap:
    terms = [TrigTerm(0, delta / (2 * math.pi), (1, 0), "sin")] if delta != 0 else []
    return TorusMap(CAT_MATRIX, terms, descriptor=f"perturbed-cat:delta={delta!r}",
                    params={"delta": float(delta)})


def identity_map(dim: int = 2) -> TorusMap:
    return TorusMap(np.eye(dim), descriptor=f"identity:dim={dim}", params={"dim": dim})


def _parse_params(text: str) -> dict:
    out = {}
    if not text:
        return out
    for item in text.split(","):
        if "=" not in item:
            raise ValueError(f"bad parameter '{item}' (expected key=value)")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_coefficient_file(path) -> TorusMap:
    """Read a key=value description of a perturbed linear torus map.

    Recognized keys: ``matrix`` (rows separated by ';'), ``name`` and any
    number of ``term`` lines of the form ``component coef kind k1 ... kd``.
    """
    matrix = None
    terms = []
    name = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            if key == "matrix":
                matrix = [[float(v) for v in row.split()] for row in val.split(";")]
            elif key == "term":
                parts = val.split()
                comp, coef, kind = int(parts[0]), float(parts[1]), parts[2]
                terms.append(TrigTerm(comp, coef, tuple(int(p) for p in parts[3:]), kind))
            elif key == "name":
                name = val
            else:
                raise ValueError(f"unknown key '{key}'")
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if matrix is None:
        raise ValueError(f"{path}: missing 'matrix'")
    return TorusMap(matrix, terms, descriptor=name or f"file:{Path(path).name}",
                    params={"file": str(path)})


def get_map(descriptor: str) -> DiscreteMap:
    """Resolve a registry descriptor such as 'cat', 'perturbed-cat:delta=0.1' or 'file:PATH'."""
    name, _, rest = descriptor.partition(":")
    if name == "file":
        return load_coefficient_file(rest)
    params = _parse_params(rest)
    if name == "cat":
        return cat_map()
    if name == "perturbed-cat":
        return perturbed_cat(float(params.get("delta", 0.1)))
    if name == "identity":
        return identity_map(int(params.get("dim", 2)))
    raise KeyError(f"unknown system '{descriptor}'")


# ---------------------------------------------------------------------------
# splittings

def _orthonormalize(V):
    """Orthonormal basis of the column span, batched over leading axes."""
    if V.shape[-1] == 1:
        n = np.linalg.norm(V, axis=-2, keepdims=True)
        if np.any(n == 0):
            raise SplittingError("frame collapsed")
        return V / n
    Q, R = np.linalg.qr(V)
    if np.any(np.abs(np.diagonal(R, axis1=-2, axis2=-1)) == 0):
        raise SplittingError("frame collapsed")
    return Q


def _align(Q, ref):
    """Fix column signs so that each column has nonnegative inner product with ref."""
    s = np.sign(np.sum(Q * ref, axis=-2, keepdims=True))
    s = np.where(s == 0, 1.0, s)
    return Q * s


def principal_sine(U, V):
    """Sine of the largest principal angle between spans of orthonormal U and V."""
    P = V @ np.swapaxes(V, -1, -2)
    R = U - P @ U
    return np.linalg.norm(R, ord=2, axis=(-2, -1)) if R.ndim > 2 else np.linalg.norm(R, 2)


class Splitting(ABC):
    """Ordered family of orthonormal frame fields, most expanding bundle first."""

    dims: tuple

    @abstractmethod
    def frames(self, x) -> list:
        """List of arrays (..., d, k_i)."""

    def frames_on_orbit(self, fmap, points) -> list:
        return self.frames(points)

    @property
    def n_bundles(self):
        return len(self.dims)

    def coarsen(self, groups):
        """Merge consecutive bundles, e.g. groups=[(0,), (1, 2)]."""
        return MergedSplitting(self, groups)


class ConstantSplitting(Splitting):
    def __init__(self, frames):
        self._frames = [_orthonormalize(np.asarray(F, dtype=float).reshape(len(F), -1))
                        for F in frames]
        self.dims = tuple(F.shape[1] for F in self._frames)
        if sum(self.dims) != self._frames[0].shape[0]:
            raise ValueError("bundle dimensions must add up to d")

    def frames(self, x):
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        return [np.broadcast_to(F, lead + F.shape).copy() for F in self._frames]


class MergedSplitting(Splitting):
    def __init__(self, parent: Splitting, groups):
        self.parent = parent
        self.groups = [tuple(g) for g in groups]
        self.dims = tuple(sum(parent.dims[i] for i in g) for g in self.groups)

    def _merge(self, fr):
        return [_orthonormalize(np.concatenate([fr[i] for i in g], axis=-1)) for g in self.groups]

    def frames(self, x):
        return self._merge(self.parent.frames(x))

    def frames_on_orbit(self, fmap, points):
        return self._merge(self.parent.frames_on_orbit(fmap, points))


def linear_seed_frames(A, groups=None, full=False):
    """Eigen-frames of the linear part grouped by modulus, most expanding first.

    By default two groups: |lambda| > 1 and |lambda| < 1. With full=True every
    distinct modulus is its own bundle.
    """
    A = np.asarray(A, dtype=float)
    w, V = np.linalg.eig(A)
    order = np.argsort(-np.abs(w), kind="stable")
    w, V = w[order], V[:, order]
    mods = np.abs(w)
    if np.any(np.abs(mods - 1) < 1e-12):
        raise SplittingError("linear part has an eigenvalue of modulus 1")
    cols = []
    used = np.zeros(len(w), bool)
    for i in range(len(w)):
        if used[i]:
            continue
        if abs(w[i].imag) > 1e-12:
            j = next(j for j in range(i + 1, len(w)) if not used[j] and abs(w[j] - np.conj(w[i])) < 1e-9)
            used[[i, j]] = True
            cols.append((mods[i], [V[:, i].real, V[:, i].imag]))
        else:
            used[i] = True
            cols.append((mods[i], [V[:, i].real]))
    if groups is None:
        if full:
            groups, cur = [], None
            for m, vs in cols:
                if cur is not None and abs(m - cur) < 1e-9 * max(1.0, m):
                    groups[-1].extend(vs)
                else:
                    groups.append(list(vs))
                cur = m
        else:
            groups = [[v for m, vs in cols if m > 1 for v in vs],
                      [v for m, vs in cols if m < 1 for v in vs]]
            groups = [g for g in groups if g]
        return [_orthonormalize(np.array(g).T) for g in groups]
    out, it = [], iter([v for _, vs in cols for v in vs])
    for k in groups:
        out.append(_orthonormalize(np.array([next(it) for _ in range(k)]).T))
    return out


def _intersect(U, S, k):
    """Orthonormal basis of span(U) ∩ span(S) (dimension k), batched."""
    M = np.concatenate([U, -S], axis=-1)
    _, _, Vh = np.linalg.svd(M)
    coef = np.swapaxes(Vh[..., -k:, :], -1, -2)[..., : U.shape[-1], :]
    return _orthonormalize(U @ coef)


class ConeSplitting(Splitting):
    """Invariant splitting by cone iteration from seed frames.

    E_1 ⊕ ... ⊕ E_j is obtained by pushing the seed span forward along the
    backward orbit (depth steps), E_j ⊕ ... ⊕ E_l by pulling back along the
    forward orbit; intermediate bundles are intersections. With ``mesh`` set
    (d = 2 only) frames are tabulated on a mesh x mesh grid and interpolated
    bilinearly, then re-orthonormalized.
    """

    def __init__(self, fmap: DiscreteMap, seeds=None, depth: int = 60, mesh=None, tol: float = 1e-10,
                 full: bool = False):
        if seeds is None:
            A = fmap.linear_part()
            if A is None:
                raise SplittingError("no linear part to seed from; pass seed frames")
            seeds = linear_seed_frames(A, full=full)
        self.fmap = fmap
        self.seeds = [np.asarray(s, dtype=float) for s in seeds]
        self.dims = tuple(s.shape[1] for s in self.seeds)
        self.depth = int(depth)
        self.tol = tol
        self.mesh = mesh
        self._grid = None
        self.last_convergence = None
        if mesh is not None:
            if fmap.dim != 2:
                raise ValueError("mesh tabulation is implemented for d = 2")
            self._build_mesh(int(mesh))

    # cumulative seed spans
    def _upper_seed(self, j):
        return _orthonormalize(np.concatenate(self.seeds[: j + 1], axis=1))

    def _lower_seed(self, j):
        return _orthonormalize(np.concatenate(self.seeds[j:], axis=1))

    def _run(self, seed, jac, lead_shape):
        """Push seed through all depth steps (V) and through the last depth-1 (W)."""
        if seed.shape[1] == 1:
            return self._run_vec(seed, jac, lead_shape)
        V = np.broadcast_to(seed, lead_shape + seed.shape).copy()
        W = V.copy()
        for s in range(self.depth):
            J = jac(s)
            V = _orthonormalize(J @ V)
            if s > 0:
                W = _orthonormalize(J @ W)
        return _align(V, seed), W

    def _run_vec(self, seed, jac, lead_shape):
        # line bundles: plain vector pushes, rescaled only occasionally
        v0 = seed[:, 0]
        V = np.broadcast_to(v0, lead_shape + v0.shape).copy()
        W = V.copy()
        for s in range(self.depth):
            J = jac(s)
            V = np.einsum("...ij,...j->...i", J, V)
            if s > 0:
                W = np.einsum("...ij,...j->...i", J, W)
            if s % 32 == 31:
                V /= np.linalg.norm(V, axis=-1, keepdims=True)
                W /= np.linalg.norm(W, axis=-1, keepdims=True)
        V = _orthonormalize(V[..., None])
        W = _orthonormalize(W[..., None])
        return _align(V, seed), W

    def _propagate(self, fwd_jac, bwd_jacinv, lead_shape):
        """fwd_jac(s), bwd_jacinv(s) return (..., d, d) arrays for step s of depth."""
        ell = len(self.seeds)
        depth = self.depth
        uppers, lowers = {}, {}
        conv = 0.0
        for j in range(ell - 1):
            seed = self._upper_seed(j)
            V, W = self._run(seed, fwd_jac, lead_shape)
            conv = max(conv, float(np.max(principal_sine(V, W), initial=0.0)))
            uppers[j] = V
        for j in range(1, ell):
            seed = self._lower_seed(j)
            V, W = self._run(seed, bwd_jacinv, lead_shape)
            conv = max(conv, float(np.max(principal_sine(V, W), initial=0.0)))
            lowers[j] = V
        out = []
        for j in range(ell):
            if j == 0:
                out.append(uppers[0])
            elif j == ell - 1:
                out.append(lowers[ell - 1])
            else:
                out.append(_align(_intersect(uppers[j], lowers[j], self.dims[j]), self.seeds[j]))
        self.last_convergence = conv
        return out, conv

    def _pointwise(self, pts):
        f = self.fmap
        depth = self.depth
        back = [pts]
        for _ in range(depth):
            back.append(f.inverse(back[-1]))
        fwd = [pts]
        for _ in range(depth - 1):
            fwd.append(f.forward(fwd[-1]))
        # forward push starts at f^{-depth}(x): step s uses Df at f^{-depth+s}(x)
        Jb = [f.derivative(back[depth - s]) for s in range(depth)]
        Jf = [f.derivative(fwd[depth - 1 - s]) for s in range(depth)]
        return self._propagate(lambda s: Jb[s], lambda s: np.linalg.inv(Jf[s]), pts.shape[:-1])

    def _build_mesh(self, m):
        g = (np.arange(m) + 0.0) / m
        X, Y = np.meshgrid(g, g, indexing="ij")
        pts = np.stack([X, Y], axis=-1).reshape(-1, 2)
        frames, conv = self._pointwise(pts)
        if conv > self.tol:
            raise SplittingError(f"cone iteration did not converge on mesh (angle {conv:.2e})")
        self._grid = [F.reshape(m, m, *F.shape[1:]) for F in frames]

    def _interp(self, pts):
        m = self._grid[0].shape[0]
        u = pts * m
        i0 = np.floor(u).astype(int)
        fr = u - i0
        i0 %= m
        i1 = (i0 + 1) % m
        out = []
        for G, seed in zip(self._grid, self.seeds):
            wx, wy = fr[..., 0, None, None], fr[..., 1, None, None]
            V = ((1 - wx) * (1 - wy) * G[i0[..., 0], i0[..., 1]] + wx * (1 - wy) * G[i1[..., 0], i0[..., 1]]
                 + (1 - wx) * wy * G[i0[..., 0], i1[..., 1]] + wx * wy * G[i1[..., 0], i1[..., 1]])
            out.append(_align(_orthonormalize(V), seed))
        return out

    def frames(self, x):
        x = wrap(np.asarray(x, dtype=float))
        single = x.ndim == 1
        pts = x[None] if single else x.reshape(-1, x.shape[-1])
        if self._grid is not None:
            frames = self._interp(pts)
        else:
            frames, conv = self._pointwise(pts)
            if conv > self.tol:
                raise SplittingError(f"cone iteration did not converge (angle {conv:.2e})")
        if single:
            return [F[0] for F in frames]
        return [F.reshape(x.shape[:-1] + F.shape[1:]) for F in frames]

    def frames_on_orbit(self, fmap, points):
        """Frames along consecutive orbit points, reusing the orbit's own Jacobians."""
        if self._grid is not None:
            return self._interp(points)
        points = np.asarray(points, dtype=float)
        n = len(points) - 1
        depth = self.depth
        back = fmap.backward_points(points[0], depth)[::-1]  # f^{-depth}..x0
        ahead = fmap.orbit_points(points[-1], depth)
        ext = np.concatenate([back[:-1], points, ahead[1:]], axis=0)
        J = fmap.derivative(ext[:-1])  # J[i] = Df(ext[i])
        Jinv = np.linalg.inv(J)
        # forward push toward ext index k+depth uses J[k+s]; backward pull from
        # ext index k+2depth uses inverse of J[k+2depth-1-s]
        fwd = lambda s: J[s: s + n + 1]
        bwd = lambda s: Jinv[2 * depth - 1 - s: 2 * depth - 1 - s + n + 1]
        frames, conv = self._propagate(fwd, bwd, (n + 1,))
        if conv > self.tol:
            raise SplittingError(f"cone iteration did not converge (angle {conv:.2e})")
        return frames


def default_splitting(fmap: DiscreteMap, full: bool = False, **kw) -> Splitting:
    """Exact eigenframes for linear maps, cone iteration otherwise."""
    A = fmap.linear_part()
    if isinstance(fmap, TorusMap) and not fmap.terms:
        return ConstantSplitting(linear_seed_frames(A, full=full))
    return ConeSplitting(fmap, full=full, **kw)


def cone_iterate_splitting(fmap: DiscreteMap, seed_frames=None, depth: int = 60, mesh=None, **kw):
    return ConeSplitting(fmap, seeds=seed_frames, depth=depth, mesh=mesh, **kw)


def splitting_invariance_residual(fmap: DiscreteMap, s: Splitting, x) -> float:
    """Largest principal-angle sine between Df_x E_i(x) and E_i(f x) over bundles."""
    x = as_point(x, fmap.dim)
    here = s.frames(x)
    there = s.frames(fmap.forward(x))
    J = fmap.derivative(x)
    res = 0.0
    for E0, E1 in zip(here, there):
        W = _orthonormalize(J @ E0)
        res = max(res, float(principal_sine(W, E1)))
    return res


def frame_matrix(frames) -> np.ndarray:
    """Concatenate bundle frames into a (possibly oblique) basis of R^d."""
    return np.concatenate(frames, axis=-1)
