"""Primitives on the unit hypersphere S^{D-1}.

Everything here works on float64 numpy arrays. Directions are plain 1-D
arrays of unit norm; tangent vectors are plain arrays orthogonal to their
base point. The weighted Frechet (Karcher) mean is the D-dimensional
angular average used by spherical barycentric aggregation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

DEGENERATE_EPS = 1e-12
PARALLEL_TOL = 1e-7
INIT_EPS = 1e-9
UNIT_TOL = 1e-9


class GeometryError(ValueError):
    """Base class for geometric failures."""


class DegenerateVector(GeometryError):
    pass


class DimensionMismatch(GeometryError):
    pass


class AntipodalDirections(GeometryError):
    """The geodesic between two directions is not unique."""


class DegenerateInit(GeometryError):
    """Weighted directions cancel; the Karcher start point is undefined."""


class NonConvergence(GeometryError):
    pass


class NotTangent(GeometryError):
    pass


@dataclass(frozen=True)
class BarycenterConfig:
    tol: float = 1e-10
    max_iters: int = 100

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ValueError(f"max_iters must be a positive integer, got {self.max_iters}")


DEFAULT_BARYCENTER = BarycenterConfig()


class PolarForm(NamedTuple):
    radius: float
    direction: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.radius * self.direction


def as_vector(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ValueError(f"expected a non-empty 1-D vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("vector has non-finite components")
    return a


def _same_dim(u: np.ndarray, v: np.ndarray) -> None:
    if u.shape != v.shape:
        raise DimensionMismatch(f"dimension {u.shape[-1]} vs {v.shape[-1]}")


def normalize(v) -> np.ndarray:
    return decompose(v).direction


def decompose(v, eps: float = DEGENERATE_EPS) -> PolarForm:
    """Split ``v`` into its Euclidean norm and unit direction."""
    v = as_vector(v)
    r = float(np.linalg.norm(v))
    if r < eps:
        raise DegenerateVector(f"norm {r:.3g} below {eps:g}; direction undefined")
    return PolarForm(r, v / r)


def _angle(u: np.ndarray, v: np.ndarray) -> float:
    # 2*atan2(|u-v|, |u+v|) keeps full precision near 0 and pi, unlike arccos
    return 2.0 * math.atan2(float(np.linalg.norm(u - v)), float(np.linalg.norm(u + v)))


def angle_between(u, v) -> float:
    """Geodesic distance in radians, in [0, pi]."""
    u, v = as_vector(u), as_vector(v)
    _same_dim(u, v)
    return _angle(u, v)


def slerp(u, v, t: float, parallel_tol: float = PARALLEL_TOL) -> np.ndarray:
    """Point at fraction ``t`` along the shortest geodesic from ``u`` to ``v``."""
    u, v = as_vector(u), as_vector(v)
    _same_dim(u, v)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    phi = _angle(u, v)
    if phi > math.pi - parallel_tol:
        raise AntipodalDirections(f"angle {phi:.12g} rad is within {parallel_tol:g} of pi")
    if t == 0.0:
        return u.copy()
    if t == 1.0:
        return v.copy()
    if phi < parallel_tol:
        out = (1.0 - t) * u + t * v
    else:
        s = math.sin(phi)
        out = (math.sin((1.0 - t) * phi) / s) * u + (math.sin(t * phi) / s) * v
    return out / np.linalg.norm(out)


def log_map(base, p, parallel_tol: float = PARALLEL_TOL) -> np.ndarray:
    """Tangent vector at ``base`` of length angle(base, p) pointing towards ``p``."""
    base, p = as_vector(base), as_vector(p)
    _same_dim(base, p)
    phi = _angle(base, p)
    if phi > math.pi - parallel_tol:
        raise AntipodalDirections(f"angle {phi:.12g} rad is within {parallel_tol:g} of pi")
    w = p - float(base @ p) * base
    n = float(np.linalg.norm(w))
    if n == 0.0 or phi == 0.0:
        return np.zeros_like(base)
    w -= float(base @ w) * base
    return (phi / np.linalg.norm(w)) * w


def exp_map(base, tangent) -> np.ndarray:
    """Follow the geodesic from ``base`` along ``tangent`` for its length."""
    base, tangent = as_vector(base), as_vector(tangent)
    _same_dim(base, tangent)
    n = float(np.linalg.norm(tangent))
    if n == 0.0:
        return base.copy()
    if abs(float(base @ tangent)) > 1e-8 * n:
        raise NotTangent("tangent vector is not orthogonal to its base point")
    out = math.cos(n) * base + (math.sin(n) / n) * tangent
    return out / np.linalg.norm(out)


def _as_directions(directions) -> np.ndarray:
    U = np.asarray(directions, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] == 0 or U.shape[1] == 0:
        raise DimensionMismatch(f"expected a non-empty (K, D) stack of directions, got shape {U.shape}")
    if not np.all(np.isfinite(U)):
        raise ValueError("directions have non-finite components")
    return U


def _check_weights(weights, k: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != k:
        raise ValueError(f"{w.shape[0]} weights for {k} directions")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and nonnegative")
    total = float(w.sum())
    if not total > 0:
        raise ValueError("weights must have a positive sum")
    return w / total


def karcher_mean(
    directions: np.ndarray | Sequence[Sequence[float]],
    weights: Sequence[float] | np.ndarray,
    cfg: BarycenterConfig = DEFAULT_BARYCENTER,
    parallel_tol: float = PARALLEL_TOL,
) -> tuple[np.ndarray, int, float]:
    """Karcher iteration; returns (mean, iterations used, last update norm)."""
    U = _as_directions(directions)
    w = _check_weights(weights, U.shape[0])

    if U.shape[0] == 2 and np.all(w > 0) and angle_between(U[0], U[1]) > math.pi - parallel_tol:
        # a pair's mean lies on its geodesic, which is not unique here
        raise AntipodalDirections("the two directions are antipodal; geodesic not unique")
    m = w @ U
    n0 = float(np.linalg.norm(m))
    if n0 < INIT_EPS:
        raise DegenerateInit(f"weighted directions cancel (|sum| = {n0:.3g})")
    m = m / n0
    if U.shape[0] == 1:
        return U[0] / np.linalg.norm(U[0]), 0, 0.0

    step = math.inf
    it = 0
    while it < cfg.max_iters:
        it += 1
        dots = U @ m
        perp = U - dots[:, None] * m
        # angles from the chord lengths, stable at both ends
        chord_minus = np.linalg.norm(U - m, axis=1)
        chord_plus = np.linalg.norm(U + m, axis=1)
        phi = 2.0 * np.arctan2(chord_minus, chord_plus)
        if np.any(phi > math.pi - parallel_tol):
            raise AntipodalDirections("a direction is antipodal to the running mean")
        pn = np.linalg.norm(perp, axis=1)
        scale = np.divide(phi, pn, out=np.zeros_like(phi), where=pn > 0)
        g = (w * scale) @ perp
        g -= float(m @ g) * m
        step = float(np.linalg.norm(g))
        if step > 0.0:
            m = math.cos(step) * m + (math.sin(step) / step) * g
            m /= np.linalg.norm(m)
        if step < cfg.tol:
            break
    if step >= cfg.tol and step > 1e-6:
        raise NonConvergence(f"update norm {step:.3g} after {it} iterations")
    return m, it, step


def spherical_barycenter(
    directions,
    weights,
    cfg: BarycenterConfig = DEFAULT_BARYCENTER,
) -> np.ndarray:
    """Weighted Frechet mean of unit directions.

    Starts from the normalized Euclidean weighted mean and iterates
    ``m <- exp_m(sum_i w_i log_m(u_i))`` until the tangent update is below
    ``cfg.tol``. Raises DegenerateInit when the weighted directions cancel
    and NonConvergence if the update is still above 1e-6 after
    ``cfg.max_iters`` iterations.
    """
    return karcher_mean(directions, weights, cfg)[0]
