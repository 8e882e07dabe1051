"""Synthetic expert bundles with controlled norms and angles.

Random numbers come from a counter-based Philox4x64 generator: the key is
the seed and the top 64-bit word of the counter is the sample index, so
bundle ``i`` is a pure function of ``(seed, i)`` and can be generated in
any order, on any worker. Draw order within a sample is fixed:

1. first direction: ``dim`` standard normals,
2. for each further expert: one uniform angle, then ``dim`` normals,
3. ``K`` standard normals for the log-radii,
4. gate weights (Dirichlet mode only).
"""
from __future__ import annotations

import enum
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .aggregation import AggregatorKind, ExpertBundle, aggregate
from .analysis import COLLAPSE_BINS, Distribution, GeometryReport
from .sphere import DEFAULT_BARYCENTER, BarycenterConfig, GeometryError

SHARD_SIZE = 2048
ANGLE_CHECK_TOL = 1e-8


class InvalidAngle(GeometryError):
    pass


class WeightMode(enum.Enum):
    EQUAL = "equal"
    DIRICHLET = "dirichlet"


@dataclass(frozen=True)
class SimConfig:
    dim: int = 768
    num_samples: int = 10_000
    experts_per_sample: int = 2
    angle_deg_min: float = 40.0
    angle_deg_max: float = 80.0
    norm_log_sigma: float = 0.05
    weight_mode: WeightMode = WeightMode.EQUAL
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("dim must be at least 2")
        if self.num_samples < 0:
            raise ValueError("num_samples must be nonnegative")
        if self.experts_per_sample < 2:
            raise ValueError("experts_per_sample must be at least 2")
        if not 0.0 <= self.angle_deg_min <= self.angle_deg_max < 180.0:
            raise ValueError(
                f"angle range must satisfy 0 <= min <= max < 180, got [{self.angle_deg_min}, {self.angle_deg_max}]"
            )
        if not self.norm_log_sigma >= 0:
            raise ValueError("norm_log_sigma must be nonnegative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be in [0, 2**64)")
        object.__setattr__(self, "weight_mode", WeightMode(self.weight_mode))


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed, counter=index << 192))


def _orthonormal_to(rng: np.random.Generator, u: np.ndarray) -> np.ndarray:
    while True:
        v = rng.standard_normal(u.shape[0])
        v -= float(u @ v) * u
        v -= float(u @ v) * u
        n = float(np.linalg.norm(v))
        if n > 1e-6:
            return v / n


def _angle(u, v) -> float:
    return 2.0 * math.atan2(float(np.linalg.norm(u - v)), float(np.linalg.norm(u + v)))


def sample_bundle(cfg: SimConfig, index: int) -> ExpertBundle:
    """Bundle number ``index`` of the simulation described by ``cfg``.

    For K = 2 the two directions are exactly ``phi`` apart, with ``phi``
    uniform in the configured range. For K > 2 each new direction is placed
    at a drawn angle from the running centroid direction, which only
    loosely controls the pairwise angles.
    """
    if not 0 <= index < cfg.num_samples:
        raise IndexError(f"sample index {index} outside [0, {cfg.num_samples})")
    rng = sample_rng(cfg.seed, index)
    lo, hi = math.radians(cfg.angle_deg_min), math.radians(cfg.angle_deg_max)

    u1 = rng.standard_normal(cfg.dim)
    u1 /= np.linalg.norm(u1)
    dirs = [u1]
    centroid = u1
    for _ in range(cfg.experts_per_sample - 1):
        phi = rng.uniform(lo, hi)
        v = _orthonormal_to(rng, centroid)
        u = math.cos(phi) * centroid + math.sin(phi) * v
        got = _angle(centroid, u)
        if abs(got - phi) > ANGLE_CHECK_TOL:
            raise InvalidAngle(f"sample {index}: constructed angle {got!r} vs target {phi!r}")
        dirs.append(u)
        s = np.sum(dirs, axis=0)
        centroid = s / np.linalg.norm(s)

    k = cfg.experts_per_sample
    radii = np.exp(cfg.norm_log_sigma * rng.standard_normal(k))
    if cfg.weight_mode is WeightMode.EQUAL:
        w = np.full(k, 1.0 / k)
    else:
        w = rng.dirichlet(np.ones(k))
        w /= w.sum()
    return ExpertBundle(radii[:, None] * np.stack(dirs), w)


def iter_bundles(cfg: SimConfig) -> Iterable[ExpertBundle]:
    for i in range(cfg.num_samples):
        yield sample_bundle(cfg, i)


def accumulate_bundle(
    report: GeometryReport,
    bundle: ExpertBundle,
    kinds: Iterable[AggregatorKind],
    bcfg: BarycenterConfig = DEFAULT_BARYCENTER,
) -> None:
    """Aggregate ``bundle`` with every kind and add it to ``report``.

    Aggregation failures are counted per kind and do not stop the run.
    """
    outputs = {}
    for kind in kinds:
        try:
            outputs[kind] = aggregate(kind, bundle, bcfg)
        except GeometryError as exc:
            report.record_error(kind, exc)
    report.accumulate(bundle, outputs)


def empty_report(kinds: Iterable[AggregatorKind]) -> GeometryReport:
    report = GeometryReport()
    for kind in kinds:
        report.collapse_ratio[kind] = Distribution(*COLLAPSE_BINS)
    return report


def _run_shard(args) -> GeometryReport:
    cfg, kinds, bcfg, start, stop = args
    report = empty_report(kinds)
    for i in range(start, stop):
        accumulate_bundle(report, sample_bundle(cfg, i), kinds, bcfg)
    return report


def thread_count(threads: int | None = None) -> int:
    """Explicit ``threads`` wins, then ``GEOAGG_THREADS``, then 1."""
    if threads is None:
        env = os.environ.get("GEOAGG_THREADS")
        if env is None or env.strip() == "":
            return 1
        threads = int(env)
    if threads < 1:
        raise ValueError(f"thread count must be positive, got {threads}")
    return threads


def run_simulation(
    cfg: SimConfig,
    aggregators: Iterable[AggregatorKind],
    bcfg: BarycenterConfig = DEFAULT_BARYCENTER,
    threads: int | None = None,
) -> GeometryReport:
    """Simulate ``cfg.num_samples`` bundles and collect their geometry.

    Work is cut into fixed shards of ``SHARD_SIZE`` samples that are merged
    in index order, so the report is identical for any worker count.
    """
    kinds = tuple(k for k in AggregatorKind if k in set(aggregators))
    if not kinds:
        raise ValueError("at least one aggregator is required")
    shards = [
        (cfg, kinds, bcfg, s, min(s + SHARD_SIZE, cfg.num_samples))
        for s in range(0, cfg.num_samples, SHARD_SIZE)
    ]
    n = min(thread_count(threads), max(len(shards), 1))
    if n == 1:
        parts = map(_run_shard, shards)
        return _merge_in_order(kinds, parts)
    with ProcessPoolExecutor(max_workers=n) as pool:
        return _merge_in_order(kinds, pool.map(_run_shard, shards))


def _merge_in_order(kinds, parts) -> GeometryReport:
    report = empty_report(kinds)
    for part in parts:
        report = report.merged(part)
    return report
