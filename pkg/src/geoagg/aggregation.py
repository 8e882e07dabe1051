"""Expert-output aggregation operators.

Four ways of combining the K routed expert outputs ``e_i`` with gate
weights ``w_i``:

* ``LINEAR``: ``sum_i w_i e_i``, the usual MoE combination.
* ``SBA``: spherical barycentric aggregation. Radius ``sum_i w_i |e_i|``,
  direction the spherical barycenter of ``e_i/|e_i|`` weighted by
  ``w_i |e_i|``.
* ``NORM_FREE``: as SBA but the angular weights are ``w_i`` alone.
* ``UNIT``: the SBA direction with the radius discarded.

Expert outputs with norm below ``DEGENERATE_EPS`` have no direction. They
are left out of the angular average (the remaining angular weights are
renormalized) and contribute their near-zero norm to the radius as usual.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .sphere import (
    DEFAULT_BARYCENTER,
    DEGENERATE_EPS,
    PARALLEL_TOL,
    AntipodalDirections,
    BarycenterConfig,
    GeometryError,
    spherical_barycenter,
)

WEIGHT_SUM_TOL = 1e-9
# below this |cos| the Gram-matrix angle is accurate to ~1e-13 rad
_GRAM_COS_LIMIT = 0.9999


class AllDegenerate(GeometryError):
    """No expert output with positive weight has a defined direction."""


class InvalidBundle(ValueError):
    pass


class AggregatorKind(enum.Enum):
    LINEAR = "linear"
    SBA = "sba"
    NORM_FREE = "norm-free"
    UNIT = "unit"

    @property
    def tag(self) -> int:
        return _TAGS[self]

    @classmethod
    def from_tag(cls, tag: int) -> "AggregatorKind":
        for kind, t in _TAGS.items():
            if t == tag:
                return kind
        raise ValueError(f"unknown aggregator tag {tag}")

    @classmethod
    def parse(cls, name: str) -> "AggregatorKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown aggregator {name!r} (choose from {choices})") from None


_TAGS = {
    AggregatorKind.LINEAR: 0,
    AggregatorKind.SBA: 1,
    AggregatorKind.NORM_FREE: 2,
    AggregatorKind.UNIT: 3,
}


@dataclass(frozen=True)
class ExpertBundle:
    """K expert outputs (rows of a (K, D) array) and their gate weights."""

    outputs: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        E = np.array(self.outputs, dtype=np.float64)
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if E.ndim == 1:
            E = E[None, :]
        if E.ndim != 2 or E.shape[0] < 1 or E.shape[1] < 1:
            raise InvalidBundle(f"outputs must be a non-empty (K, D) array, got shape {E.shape}")
        if w.shape[0] != E.shape[0]:
            raise InvalidBundle(f"{w.shape[0]} weights for {E.shape[0]} experts")
        if not (np.all(np.isfinite(E)) and np.all(np.isfinite(w))):
            raise InvalidBundle("non-finite values in bundle")
        if np.any(w < 0):
            raise InvalidBundle("gate weights must be nonnegative")
        if abs(float(w.sum()) - 1.0) > WEIGHT_SUM_TOL:
            raise InvalidBundle(f"gate weights sum to {float(w.sum())!r}, expected 1")
        E.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "outputs", E)
        object.__setattr__(self, "weights", w)

    @property
    def k(self) -> int:
        return self.outputs.shape[0]

    @property
    def dim(self) -> int:
        return self.outputs.shape[1]

    def radii(self) -> np.ndarray:
        E = self.outputs
        return np.sqrt(np.einsum("ij,ij->i", E, E))

    def rotated(self, Q: np.ndarray) -> "ExpertBundle":
        return ExpertBundle(self.outputs @ np.asarray(Q).T, self.weights)


def linear_aggregate(bundle: ExpertBundle) -> np.ndarray:
    return bundle.weights @ bundle.outputs


def _pair_coefficients(E, g, a1, a2, parallel_tol):
    """Coefficients (c1, c2) with slerp(u1, u2, t) = c1*e1 + c2*e2.

    ``g`` is the Gram matrix of the two rows of ``E`` as nested lists and
    ``a1, a2`` the angular weights; t = a2 / (a1 + a2).
    """
    r1, r2 = math.sqrt(g[0][0]), math.sqrt(g[1][1])
    t = a2 / (a1 + a2)
    cos_phi = min(1.0, max(-1.0, g[0][1] / (r1 * r2)))
    if abs(cos_phi) < _GRAM_COS_LIMIT:
        phi = math.acos(cos_phi)
    else:
        u1, u2 = E[0] / r1, E[1] / r2
        phi = 2.0 * math.atan2(float(np.linalg.norm(u1 - u2)), float(np.linalg.norm(u1 + u2)))
    if phi > math.pi - parallel_tol:
        raise AntipodalDirections(f"expert directions {phi:.12g} rad apart; geodesic not unique")
    if phi < parallel_tol:
        b1, b2 = 1.0 - t, t
    else:
        s = math.sin(phi)
        b1, b2 = math.sin((1.0 - t) * phi) / s, math.sin(t * phi) / s
    c1, c2 = b1 / r1, b2 / r2
    # |c1 e1 + c2 e2| from the Gram matrix; rescale to exact unit length
    n = math.sqrt(c1 * c1 * g[0][0] + 2.0 * c1 * c2 * g[0][1] + c2 * c2 * g[1][1])
    return c1 / n, c2 / n


def _spherical(bundle: ExpertBundle, cfg: BarycenterConfig, norm_aware: bool, closed_form: bool, unit: bool):
    """Spherical aggregate: radius times barycentric direction, or the
    direction alone when ``unit``."""
    E, w = bundle.outputs, bundle.weights
    if E.shape[0] == 2 and closed_form:
        g = (E @ E.T).tolist()
        w1, w2 = w.tolist()
        r1, r2 = math.sqrt(g[0][0]), math.sqrt(g[1][1])
        if r1 >= DEGENERATE_EPS and r2 >= DEGENERATE_EPS and w1 > 0 and w2 > 0:
            a1, a2 = (w1 * r1, w2 * r2) if norm_aware else (w1, w2)
            c1, c2 = _pair_coefficients(E, g, a1, a2, PARALLEL_TOL)
            scale = 1.0 if unit else w1 * r1 + w2 * r2
            return np.array([scale * c1, scale * c2]) @ E
    radius, direction = _angular(bundle, cfg, norm_aware, closed_form)
    return direction if unit else radius * direction


def _angular(bundle: ExpertBundle, cfg: BarycenterConfig, norm_aware: bool, closed_form: bool):
    """Return (radius, unit direction) of the spherical aggregate."""
    E, w = bundle.outputs, bundle.weights

    r = bundle.radii()
    ok = r >= DEGENERATE_EPS
    if not ok.any():
        raise AllDegenerate("every expert output is near zero")
    radius = float(w @ r)
    a = w * r if norm_aware else w.copy()
    keep = ok & (a > 0)
    if not keep.any():
        raise AllDegenerate("no expert with positive weight has a defined direction")
    U = E[keep] / r[keep, None]
    a = a[keep]
    if U.shape[0] == 1:
        return radius, U[0]
    if U.shape[0] == 2 and closed_form:
        c1, c2 = _pair_coefficients(U, (U @ U.T).tolist(), float(a[0]), float(a[1]), PARALLEL_TOL)
        return radius, c1 * U[0] + c2 * U[1]
    return radius, spherical_barycenter(U, a, cfg)


def sba_aggregate(
    bundle: ExpertBundle, cfg: BarycenterConfig = DEFAULT_BARYCENTER, *, closed_form: bool = True
) -> np.ndarray:
    """Spherical barycentric aggregate; ``|y| == sum_i w_i |e_i|``.

    With ``closed_form`` (the default) two-expert bundles use the slerp
    formula directly; otherwise every K goes through the Karcher iteration.
    """
    return _spherical(bundle, cfg, True, closed_form, False)


def norm_free_aggregate(
    bundle: ExpertBundle, cfg: BarycenterConfig = DEFAULT_BARYCENTER, *, closed_form: bool = True
) -> np.ndarray:
    return _spherical(bundle, cfg, False, closed_form, False)


def unit_normalized_aggregate(
    bundle: ExpertBundle, cfg: BarycenterConfig = DEFAULT_BARYCENTER, *, closed_form: bool = True
) -> np.ndarray:
    return _spherical(bundle, cfg, True, closed_form, True)


def aggregate(
    kind: AggregatorKind,
    bundle: ExpertBundle,
    cfg: BarycenterConfig = DEFAULT_BARYCENTER,
    *,
    closed_form: bool = True,
) -> np.ndarray:
    if kind is AggregatorKind.LINEAR:
        return linear_aggregate(bundle)
    if kind is AggregatorKind.SBA:
        return sba_aggregate(bundle, cfg, closed_form=closed_form)
    if kind is AggregatorKind.NORM_FREE:
        return norm_free_aggregate(bundle, cfg, closed_form=closed_form)
    if kind is AggregatorKind.UNIT:
        return unit_normalized_aggregate(bundle, cfg, closed_form=closed_form)
    raise TypeError(f"not an AggregatorKind: {kind!r}")


def collapse_ratio(bundle: ExpertBundle, y) -> float:
    """|y| over the mean norm of the contributing experts (1 = on the sphere)."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (bundle.dim,):
        raise ValueError(f"output shape {y.shape} does not match bundle dim {bundle.dim}")
    mean_r = float(bundle.radii().mean())
    if mean_r < DEGENERATE_EPS:
        raise AllDegenerate("mean expert norm is near zero")
    return float(np.linalg.norm(y)) / mean_r
