"""Streaming geometry diagnostics over expert bundles.

A :class:`GeometryReport` accumulates three families of samples:

* norm ratios ``r_i / r_j`` between routed experts (routing order, i < j),
* pairwise angles in degrees between routed expert directions,
* collapse ratios ``|y| / mean(r)`` for each aggregator's output.

Every family is a :class:`Distribution`: a fixed-edge histogram plus the
sufficient statistics (count, sum, sum of squares, min, max). Reports built
on disjoint shards combine with :func:`merge`. Percentiles are interpolated
from the histogram, so they are only accurate to one bin width.
"""
from __future__ import annotations

import bisect
import csv
import functools
import io
import json
import math
from pathlib import Path
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .aggregation import AggregatorKind, ExpertBundle
from .sphere import DEGENERATE_EPS


class BinMismatch(ValueError):
    pass


# (lo, hi, bins). The norm-ratio grid is centred on 1.0 so that ratios of
# equal norms never straddle an edge.
NORM_RATIO_BINS = (0.49, 1.51, 51)
ANGLE_BINS = (0.0, 180.0, 36)
COLLAPSE_BINS = (0.0, 1.2, 50)


def _fmt(x: float) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{x:.9g}"


@dataclass(frozen=True)
class SummaryStats:
    count: int
    mean: float
    stddev: float
    min: float
    max: float
    p05: float
    p50: float
    p95: float

    def as_dict(self) -> dict:
        out = {}
        for k in ("count", "mean", "stddev", "min", "max", "p05", "p50", "p95"):
            v = getattr(self, k)
            out[k] = None if isinstance(v, float) and math.isnan(v) else v
        return out


class Histogram:
    """Half-open bins [lo, hi) with the last bin closed; out-of-range values
    go to underflow / overflow."""

    def __init__(self, edges):
        edges = [float(e) for e in edges]
        if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("bin edges must be strictly increasing with at least 2 entries")
        self.edges = edges
        self.counts = [0] * (len(edges) - 1)
        self.underflow = 0
        self.overflow = 0

    @classmethod
    def uniform(cls, lo: float, hi: float, bins: int) -> "Histogram":
        return cls(np.linspace(lo, hi, bins + 1))

    def bin_index(self, x: float) -> int | None:
        """Bin for ``x``; -1 for underflow, len(counts) for overflow."""
        if x < self.edges[0]:
            return -1
        if x > self.edges[-1]:
            return len(self.counts)
        i = bisect.bisect_right(self.edges, x) - 1
        return min(i, len(self.counts) - 1)

    def add(self, x: float) -> None:
        i = self.bin_index(x)
        if i < 0:
            self.underflow += 1
        elif i >= len(self.counts):
            self.overflow += 1
        else:
            self.counts[i] += 1

    @property
    def total(self) -> int:
        return sum(self.counts) + self.underflow + self.overflow

    def merged(self, other: "Histogram") -> "Histogram":
        if self.edges != other.edges:
            raise BinMismatch("histograms have different bin edges")
        h = Histogram(self.edges)
        h.counts = [a + b for a, b in zip(self.counts, other.counts)]
        h.underflow = self.underflow + other.underflow
        h.overflow = self.overflow + other.overflow
        return h

    def quantile(self, q: float, lo: float, hi: float) -> float:
        """Interpolated q-quantile; underflow/overflow mass is spread over
        [lo, edge0) and (edge_last, hi] using the observed extremes."""
        n = self.total
        if n == 0:
            return math.nan
        target = q * n
        cells = [(min(lo, self.edges[0]), self.edges[0], self.underflow)]
        cells += [(a, b, c) for a, b, c in zip(self.edges, self.edges[1:], self.counts)]
        cells.append((self.edges[-1], max(hi, self.edges[-1]), self.overflow))
        seen = 0
        value = hi
        for a, b, c in cells:
            if c and seen + c >= target:
                value = a + (b - a) * (target - seen) / c
                break
            seen += c
        return min(max(value, lo), hi)


class Distribution:
    def __init__(self, lo: float, hi: float, bins: int):
        self.hist = Histogram.uniform(lo, hi, bins)
        self.count = 0
        self.sum = 0.0
        self.sumsq = 0.0
        self.min = math.inf
        self.max = -math.inf

    def add(self, x: float) -> None:
        x = float(x)
        self.hist.add(x)
        self.count += 1
        self.sum += x
        self.sumsq += x * x
        if x < self.min:
            self.min = x
        if x > self.max:
            self.max = x

    def merged(self, other: "Distribution") -> "Distribution":
        d = Distribution.__new__(Distribution)
        d.hist = self.hist.merged(other.hist)
        d.count = self.count + other.count
        d.sum = self.sum + other.sum
        d.sumsq = self.sumsq + other.sumsq
        d.min = min(self.min, other.min)
        d.max = max(self.max, other.max)
        return d

    @property
    def mean(self) -> float:
        return self.sum / self.count if self.count else math.nan

    @property
    def stddev(self) -> float:
        if self.count == 0:
            return math.nan
        m = self.sum / self.count
        return math.sqrt(max(self.sumsq / self.count - m * m, 0.0))

    def summary(self) -> SummaryStats:
        if self.count == 0:
            nan = math.nan
            return SummaryStats(0, nan, nan, nan, nan, nan, nan, nan)
        qs = [self.hist.quantile(q, self.min, self.max) for q in (0.05, 0.5, 0.95)]
        return SummaryStats(self.count, self.mean, self.stddev, self.min, self.max, *qs)

    def to_dict(self) -> dict:
        h = self.hist
        return {
            "histogram": {
                "bin_edges": list(h.edges),
                "counts": list(h.counts),
                "underflow": h.underflow,
                "overflow": h.overflow,
            },
            "summary": self.summary().as_dict(),
        }


@functools.lru_cache(maxsize=None)
def _pairs(k: int):
    return np.triu_indices(k, 1)


@dataclass
class GeometryReport:
    norm_ratio: Distribution = field(default_factory=lambda: Distribution(*NORM_RATIO_BINS))
    pairwise_angle_deg: Distribution = field(default_factory=lambda: Distribution(*ANGLE_BINS))
    collapse_ratio: dict = field(default_factory=dict)
    samples: int = 0
    degenerate_skipped: int = 0
    aggregation_errors: dict = field(default_factory=dict)

    def collapse(self, kind: AggregatorKind) -> Distribution:
        if kind not in self.collapse_ratio:
            self.collapse_ratio[kind] = Distribution(*COLLAPSE_BINS)
        return self.collapse_ratio[kind]

    def accumulate(self, bundle: ExpertBundle, outputs: Mapping[AggregatorKind, np.ndarray]) -> "GeometryReport":
        E = bundle.outputs
        r = bundle.radii()
        ok = r >= DEGENERATE_EPS
        self.samples += 1
        self.degenerate_skipped += int((~ok).sum())

        U = E[ok] / r[ok, None]
        rk = r[ok]
        k = U.shape[0]
        if k >= 2:
            iu, ju = _pairs(k)
            dm, dp = U[iu] - U[ju], U[iu] + U[ju]
            minus = np.sqrt(np.einsum("ij,ij->i", dm, dm))
            plus = np.sqrt(np.einsum("ij,ij->i", dp, dp))
            angles = np.degrees(2.0 * np.arctan2(minus, plus))
            ratios = rk[iu] / rk[ju]
            for x in ratios.tolist():
                self.norm_ratio.add(x)
            for x in angles.tolist():
                self.pairwise_angle_deg.add(x)

        mean_r = float(r.mean())
        for kind in AggregatorKind:
            if kind in outputs and mean_r >= DEGENERATE_EPS:
                y = outputs[kind]
                self.collapse(kind).add(float(np.linalg.norm(y)) / mean_r)
        return self

    def record_error(self, kind: AggregatorKind, exc: Exception) -> None:
        name = type(exc).__name__
        per_kind = self.aggregation_errors.setdefault(kind, {})
        per_kind[name] = per_kind.get(name, 0) + 1

    def merged(self, other: "GeometryReport") -> "GeometryReport":
        out = GeometryReport(
            norm_ratio=self.norm_ratio.merged(other.norm_ratio),
            pairwise_angle_deg=self.pairwise_angle_deg.merged(other.pairwise_angle_deg),
            samples=self.samples + other.samples,
            degenerate_skipped=self.degenerate_skipped + other.degenerate_skipped,
        )
        for kind in AggregatorKind:
            a, b = self.collapse_ratio.get(kind), other.collapse_ratio.get(kind)
            if a is not None and b is not None:
                out.collapse_ratio[kind] = a.merged(b)
            elif a is not None or b is not None:
                out.collapse_ratio[kind] = (a or b).merged(Distribution(*COLLAPSE_BINS))
            errs = {}
            for src in (self.aggregation_errors.get(kind, {}), other.aggregation_errors.get(kind, {})):
                for name, n in src.items():
                    errs[name] = errs.get(name, 0) + n
            if errs:
                out.aggregation_errors[kind] = dict(sorted(errs.items()))
        return out

    def metrics(self) -> list[tuple[str, str, Distribution]]:
        """(metric name, csv file name, distribution) in fixed order."""
        out = [
            ("norm_ratio", "norm_ratio.csv", self.norm_ratio),
            ("pairwise_angle_deg", "angles.csv", self.pairwise_angle_deg),
        ]
        for kind in AggregatorKind:
            if kind in self.collapse_ratio:
                out.append((f"collapse_ratio.{kind.value}", f"collapse_{kind.value}.csv", self.collapse_ratio[kind]))
        return out

    def to_dict(self) -> dict:
        return {
            "samples": self.samples,
            "degenerate_skipped": self.degenerate_skipped,
            "norm_ratio": self.norm_ratio.to_dict(),
            "pairwise_angle_deg": self.pairwise_angle_deg.to_dict(),
            "collapse_ratio": {
                kind.value: self.collapse_ratio[kind].to_dict()
                for kind in AggregatorKind
                if kind in self.collapse_ratio
            },
            "aggregation_errors": {
                kind.value: self.aggregation_errors[kind]
                for kind in AggregatorKind
                if kind in self.aggregation_errors
            },
        }


def accumulate_sample(report: GeometryReport, bundle: ExpertBundle, outputs) -> GeometryReport:
    return report.accumulate(bundle, outputs)


def merge(a: GeometryReport, b: GeometryReport) -> GeometryReport:
    return a.merged(b)


def report_to_csv(report: GeometryReport) -> dict[str, str]:
    """Name -> CSV text: one histogram file per metric plus ``summary.csv``."""
    docs = {}
    summary = io.StringIO()
    sw = csv.writer(summary, lineterminator="\n")
    sw.writerow(["metric", "count", "mean", "stddev", "min", "p05", "p50", "p95", "max"])
    for name, fname, dist in report.metrics():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        h = dist.hist
        w.writerow(["-inf", _fmt(h.edges[0]), h.underflow])
        for lo, hi, c in zip(h.edges, h.edges[1:], h.counts):
            w.writerow([_fmt(lo), _fmt(hi), c])
        w.writerow([_fmt(h.edges[-1]), "inf", h.overflow])
        docs[fname] = buf.getvalue()
        s = dist.summary()
        sw.writerow([name, s.count] + [_fmt(v) for v in (s.mean, s.stddev, s.min, s.p05, s.p50, s.p95, s.max)])
    docs["summary.csv"] = summary.getvalue()
    return docs


def report_to_json(report: GeometryReport) -> str:
    return json.dumps(report.to_dict(), indent=2, allow_nan=False) + "\n"


def write_report(report: GeometryReport, out_dir) -> list[str]:
    """Write every CSV plus ``summary.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in report_to_csv(report).items():
        (out / name).write_text(text, encoding="utf-8")
        written.append(name)
    (out / "summary.json").write_text(report_to_json(report), encoding="utf-8")
    written.append("summary.json")
    return written
