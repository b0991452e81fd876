"""Soft cross-entropy with label smoothing and the geometry of its minimizers.

Labels are 1-based class indices. States may carry more components than
classes; only the first ``num_classes`` components (the class slice) enter
the loss and the distance to the minimizer line.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize


@dataclass(frozen=True)
class SmoothingSpec:
    num_classes: int
    p_d: float

    def __post_init__(self):
        C, p = self.num_classes, self.p_d
        if int(C) != C or C < 2:
            raise ValueError(f"num_classes must be an integer >= 2, got {C}")
        if not (1.0 / C < p < 1.0):
            raise ValueError(
                f"p_d must lie in (1/C, 1) = ({1.0 / C:.6g}, 1), got {p}")
        if not self.delta < 0:
            raise ValueError(f"inconsistent delta sign for p_d={p}, C={C}")

    @property
    def off_target(self) -> float:
        return (1.0 - self.p_d) / (self.num_classes - 1)

    @property
    def delta(self) -> float:
        """Gap between every off-label component and the label component on the minimizer line."""
        C, p = self.num_classes, self.p_d
        return -math.log((C - 1) * p / (1.0 - p))

    @property
    def offset(self) -> float:
        # entropy of the smoothed target; identical for every label
        p, q = self.p_d, self.off_target
        return -(p * math.log(p) + (self.num_classes - 1) * q * math.log(q))

    def targets(self, labels) -> np.ndarray:
        """Smoothed target rows for an array of labels, shape ``labels.shape + (C,)``."""
        labels = check_labels(labels, self.num_classes)
        out = np.full(labels.shape + (self.num_classes,), self.off_target)
        np.put_along_axis(out, (labels - 1)[..., None], self.p_d, axis=-1)
        return out


def check_labels(labels, num_classes: int) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.round(arr)):
            raise ValueError("labels must be integers")
        arr = arr.astype(np.int64)
    arr = arr.astype(np.int64, copy=False)
    bad = (arr < 1) | (arr > num_classes)
    if np.any(bad):
        idx = int(np.flatnonzero(bad.ravel())[0])
        raise ValueError(
            f"label {arr.ravel()[idx]} at index {idx} outside [1, {num_classes}]")
    return arr


def _class_slice(x, num_classes: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < num_classes:
        raise ValueError(
            f"state has {x.shape[-1]} components, need at least {num_classes}")
    bad = ~np.isfinite(x)
    if np.any(bad):
        idx = np.unravel_index(int(np.flatnonzero(bad)[0]), x.shape)
        raise ValueError(f"non-finite state component at index {tuple(int(i) for i in idx)}")
    return x[..., :num_classes]


def log_softmax(x, num_classes: int) -> np.ndarray:
    z = _class_slice(x, num_classes)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(x, num_classes: int) -> np.ndarray:
    """Class probabilities from the first ``num_classes`` components of ``x``."""
    return np.exp(log_softmax(x, num_classes))


def soft_targets(y: int, spec: SmoothingSpec) -> np.ndarray:
    return spec.targets(y)


def soft_ce(x, y, spec: SmoothingSpec):
    """Offset soft cross-entropy; zero exactly on the minimizer line of ``y``.

    Works on a single state (returns a float) or on a batch of states with
    matching labels (returns an array).
    """
    logp = log_softmax(x, spec.num_classes)
    q = spec.targets(y)
    val = -(q * logp).sum(axis=-1) - spec.offset
    val = np.maximum(val, 0.0)
    return float(val) if val.ndim == 0 else val


def hard_ce(x, y, num_classes: int):
    logp = log_softmax(x, num_classes)
    y = check_labels(y, num_classes)
    val = -np.take_along_axis(logp, (y - 1)[..., None], axis=-1)[..., 0]
    return float(val) if val.ndim == 0 else val


def soft_ce_gradient(x, y, spec: SmoothingSpec) -> np.ndarray:
    """Gradient ``p(x) - q(y)`` on the class slice, zero on extra components."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    g[..., :spec.num_classes] = softmax(x, spec.num_classes) - spec.targets(y)
    return g


def hard_ce_gradient(x, y, num_classes: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    p = softmax(x, num_classes)
    y = check_labels(y, num_classes)
    np.put_along_axis(p, (y - 1)[..., None],
                      np.take_along_axis(p, (y - 1)[..., None], axis=-1) - 1.0, axis=-1)
    g[..., :num_classes] = p
    return g


def soft_ce_hessian(x, spec: SmoothingSpec) -> np.ndarray:
    """``diag(p) - p p^T`` over the class slice; the label does not enter."""
    p = softmax(x, spec.num_classes)
    return np.diag(p) - np.outer(p, p)


def invariance_transform(x) -> np.ndarray:
    """Subtract the component mean (projection onto the zero-sum subspace)."""
    x = np.asarray(x, dtype=np.float64)
    return x - x.mean(axis=-1, keepdims=True)


@dataclass(frozen=True)
class MinimizerLine:
    label: int
    base_point: np.ndarray

    def point(self, t: float) -> np.ndarray:
        return self.base_point + t


def minimizer_base_point(y: int, spec: SmoothingSpec) -> np.ndarray:
    C, d = spec.num_classes, spec.delta
    base = np.full(C, d / C)
    base[y - 1] = -(C - 1) / C * d
    return base


def minimizer_line(y: int, spec: SmoothingSpec) -> MinimizerLine:
    y = int(check_labels(y, spec.num_classes))
    base = minimizer_base_point(y, spec)
    if abs(base.sum()) > 1e-12:
        raise AssertionError("minimizer base point is not zero-sum")
    others = np.delete(base, y - 1)
    if not np.allclose(others - base[y - 1], spec.delta, rtol=0, atol=1e-12):
        raise AssertionError("minimizer base point is not on the minimizer line")
    base.flags.writeable = False
    return MinimizerLine(label=y, base_point=base)


def dist_to_minimizers(x, y, spec: SmoothingSpec):
    """Euclidean distance from the class slice of ``x`` to the minimizer line of ``y``."""
    C = spec.num_classes
    z = invariance_transform(_class_slice(x, C))
    labels = check_labels(y, C)
    base = np.full(labels.shape + (C,), spec.delta / C)
    np.put_along_axis(base, (labels - 1)[..., None], -(C - 1) / C * spec.delta, axis=-1)
    d = np.linalg.norm(z - base, axis=-1)
    return float(d) if d.ndim == 0 else d


class LowerBound:
    """Continuous, non-decreasing, convex lower bound on soft CE as a function of distance.

    Built from the minimum of soft CE over directions orthogonal to the ones
    vector at each radius.  Between radii the bound uses the minimum found at
    the previous (smaller) radius, which is valid because soft CE increases
    along every ray leaving the minimizer.  The lower convex hull of those
    points keeps the bound valid and makes it convex.  Past the last radius
    the bound grows linearly through the origin (soft CE over distance is
    non-decreasing along every ray).
    """

    def __init__(self, radii: np.ndarray, values: np.ndarray):
        self.radii = np.asarray(radii, dtype=np.float64)
        self.values = np.asarray(values, dtype=np.float64)
        self.radii.flags.writeable = False
        self.values.flags.writeable = False
        self._tail_slope = self.values[-1] / self.radii[-1]

    def __call__(self, s):
        s = np.asarray(s, dtype=np.float64)
        if np.any(s < 0):
            raise ValueError("distance must be nonnegative")
        out = np.interp(s, self.radii, self.values)
        out = np.where(s > self.radii[-1], self._tail_slope * s, out)
        return float(out) if out.ndim == 0 else out


def _lower_convex_hull(xs, ys):
    hull = []
    for p in zip(xs, ys):
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    hx, hy = map(np.array, zip(*hull))
    return hx, np.interp(xs, hx, hy)


def _radial_minimum(s, spec, base, directions):
    """Minimum of soft CE over unit zero-sum directions at radius ``s`` from ``base``."""
    C = spec.num_classes
    q = spec.targets(1)
    vals = soft_ce(base + s * directions, np.ones(len(directions), dtype=int), spec)
    if C == 2:
        i = int(np.argmin(vals))
        return vals[i], directions[i]

    def fun(v):
        tv = v - v.mean()
        nrm = np.linalg.norm(tv)
        d = tv / nrm
        x = base + s * d
        logp = log_softmax(x, C)
        f = -(q * logp).sum() - spec.offset
        g = np.exp(logp) - q
        g = g - g.mean()
        grad = s * (g - d * (d @ g)) / nrm
        return f, grad

    best_val, best_dir = np.inf, None
    for i in np.argsort(vals)[:4]:
        res = minimize(fun, directions[i], jac=True, method="L-BFGS-B",
                       options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 500})
        cand = min(float(res.fun), float(vals[i]))
        if cand < best_val:
            v = res.x - res.x.mean()
            best_val, best_dir = cand, v / np.linalg.norm(v)
    return max(best_val, 0.0), best_dir


@functools.lru_cache(maxsize=None)
def lower_bound_alpha(spec: SmoothingSpec, num_directions: int = 256,
                      num_radii: int = 64, max_radius: float = 50.0,
                      min_radius: float = 1e-3, seed: int = 0) -> LowerBound:
    """Numerically constructed class-K lower bound ``alpha`` with
    ``soft_ce(x, y) >= alpha(dist_to_minimizers(x, y))``.

    The result is cached per argument tuple and immutable.
    """
    C = spec.num_classes
    base = minimizer_base_point(1, spec)
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((num_directions, C))
    structured = np.vstack([np.eye(C), -np.eye(C)])
    dirs = invariance_transform(np.vstack([structured, dirs]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    radii = np.concatenate([[0.0], np.geomspace(min_radius, max_radius, num_radii)])
    minima = np.zeros_like(radii)
    warm = None
    for i, s in enumerate(radii[1:], start=1):
        cand = dirs if warm is None else np.vstack([warm, dirs])
        minima[i], warm = _radial_minimum(s, spec, base, cand)
    # running minimum from the right gives a monotone envelope
    minima = np.minimum.accumulate(minima[::-1])[::-1]
    # value at radius i is the minimum found at radius i-1
    shifted = np.concatenate([[0.0], minima[:-1]])
    _, hull = _lower_convex_hull(radii, shifted)
    return LowerBound(radii, np.maximum(hull, 0.0))
