"""A single sparse MoE layer with a pluggable aggregation step.

Routing is softmax top-K over ``gate_matrix @ x`` (ties go to the lower
expert index) followed by renormalization of the selected probabilities.
Experts are two-layer MLPs with exact GELU. Only the final combination of
expert outputs depends on the layer's :class:`AggregatorKind`.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import erf

from .aggregation import AggregatorKind, ExpertBundle, aggregate
from .sphere import DEFAULT_BARYCENTER, BarycenterConfig


def _finite(name, a):
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")


@dataclass(frozen=True)
class RouterParams:
    gate_matrix: np.ndarray
    top_k: int
    renormalize: bool = True

    def __post_init__(self):
        g = np.asarray(self.gate_matrix, dtype=np.float64)
        if g.ndim != 2:
            raise ValueError(f"gate_matrix must be 2-D, got shape {g.shape}")
        _finite("gate_matrix", g)
        if not 1 <= self.top_k <= g.shape[0]:
            raise ValueError(f"top_k={self.top_k} must be in [1, {g.shape[0]}]")
        object.__setattr__(self, "gate_matrix", g)

    @property
    def num_experts(self) -> int:
        return self.gate_matrix.shape[0]


@dataclass(frozen=True)
class ExpertParams:
    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    def __post_init__(self):
        for name in ("w_in", "b_in", "w_out", "b_out"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            _finite(name, a)
            object.__setattr__(self, name, a)
        h, d = self.w_in.shape
        if self.b_in.shape != (h,) or self.w_out.shape != (d, h) or self.b_out.shape != (d,):
            raise ValueError(
                f"inconsistent expert shapes w_in {self.w_in.shape}, b_in {self.b_in.shape}, "
                f"w_out {self.w_out.shape}, b_out {self.b_out.shape}"
            )


@dataclass(frozen=True)
class MoELayer:
    router: RouterParams
    experts: Sequence[ExpertParams]
    aggregator: AggregatorKind = AggregatorKind.SBA

    def __post_init__(self):
        experts = tuple(self.experts)
        if len(experts) != self.router.num_experts:
            raise ValueError(f"{len(experts)} experts but router has {self.router.num_experts} rows")
        d = self.router.gate_matrix.shape[1]
        h = experts[0].w_in.shape[0]
        for p in experts:
            if p.w_in.shape != (h, d):
                raise ValueError("all experts must share D and H")
        object.__setattr__(self, "experts", experts)
        object.__setattr__(self, "aggregator", AggregatorKind(self.aggregator))

    @property
    def num_experts(self) -> int:
        return self.router.num_experts

    @property
    def dim(self) -> int:
        return self.router.gate_matrix.shape[1]

    @property
    def hidden(self) -> int:
        return self.experts[0].w_in.shape[0]

    def with_aggregator(self, kind: AggregatorKind) -> "MoELayer":
        return replace(self, aggregator=kind)


@dataclass(frozen=True)
class RoutingDecision:
    indices: tuple
    weights: np.ndarray = field(repr=False)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def route(router: RouterParams, x) -> RoutingDecision:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (router.gate_matrix.shape[1],):
        raise ValueError(f"input shape {x.shape} does not match gate matrix {router.gate_matrix.shape}")
    probs = softmax(router.gate_matrix @ x)
    # stable sort on -p keeps the lower index first among ties
    idx = np.argsort(-probs, kind="stable")[: router.top_k]
    w = probs[idx]
    if router.renormalize:
        w = w / w.sum()
    return RoutingDecision(tuple(int(i) for i in idx), w)


def gelu(z):
    return 0.5 * z * (1.0 + erf(z / math.sqrt(2.0)))


def expert_forward(p: ExpertParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return p.w_out @ gelu(p.w_in @ x + p.b_in) + p.b_out


def expert_bundle(layer: MoELayer, x) -> tuple[RoutingDecision, ExpertBundle]:
    """Routing decision and the routed experts' raw outputs for ``x``."""
    d = route(layer.router, x)
    outs = np.stack([expert_forward(layer.experts[i], x) for i in d.indices])
    return d, ExpertBundle(outs, d.weights)


def moe_forward(layer: MoELayer, x, cfg: BarycenterConfig = DEFAULT_BARYCENTER) -> np.ndarray:
    _, bundle = expert_bundle(layer, x)
    return aggregate(layer.aggregator, bundle, cfg)


class BatchError(Exception):
    """Raised after a batch finishes when some items failed.

    ``errors`` maps item index to the exception; ``results`` holds the
    outputs in input order with ``None`` at failed positions.
    """

    def __init__(self, errors: dict, results: list):
        first = min(errors)
        super().__init__(f"{len(errors)} of {len(results)} items failed; first at index {first}: {errors[first]!r}")
        self.errors = errors
        self.results = results


def batch_forward(
    layer: MoELayer,
    xs,
    cfg: BarycenterConfig = DEFAULT_BARYCENTER,
    threads: int = 1,
) -> list:
    """``moe_forward`` over ``xs`` in input order, optionally on a thread pool."""

    def one(x):
        try:
            return moe_forward(layer, x, cfg), None
        except Exception as exc:  # reported per item below
            return None, exc

    xs = list(xs)
    if threads > 1 and len(xs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(one, xs))
    else:
        pairs = [one(x) for x in xs]
    results = [y for y, _ in pairs]
    errors = {i: e for i, (_, e) in enumerate(pairs) if e is not None}
    if errors:
        raise BatchError(errors, results)
    return results


def init_layer(
    seed: int,
    num_experts: int,
    dim: int,
    hidden: int,
    top_k: int,
    aggregator: AggregatorKind = AggregatorKind.SBA,
) -> MoELayer:
    """Seeded layer: PCG64 (``numpy.random.default_rng(seed)``), matrices
    uniform in (-1/sqrt(dim), 1/sqrt(dim)) drawn in the order gate, then
    w_in and w_out per expert; zero biases. Values are rounded to binary32
    so the layer survives a GEOP round trip unchanged."""
    if min(num_experts, dim, hidden, top_k) < 1:
        raise ValueError("sizes must be positive")
    if top_k > num_experts:
        raise ValueError(f"top_k={top_k} exceeds num_experts={num_experts}")
    rng = np.random.default_rng(seed)
    a = 1.0 / math.sqrt(dim)

    def mat(*shape):
        return rng.uniform(-a, a, size=shape).astype(np.float32).astype(np.float64)

    gate = mat(num_experts, dim)
    experts = []
    for _ in range(num_experts):
        w_in = mat(hidden, dim)
        w_out = mat(dim, hidden)
        experts.append(ExpertParams(w_in, np.zeros(hidden), w_out, np.zeros(dim)))
    return MoELayer(RouterParams(gate, top_k), experts, aggregator)
