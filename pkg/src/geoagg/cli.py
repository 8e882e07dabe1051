"""Command line: ``geoagg {simulate,analyze,moe-demo,bench}``.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import geoa
from .aggregation import AggregatorKind, ExpertBundle, linear_aggregate, sba_aggregate
from .analysis import write_report
from .moe import BatchError, batch_forward, expert_bundle, init_layer
from .sim import (
    SimConfig,
    WeightMode,
    accumulate_bundle,
    empty_report,
    iter_bundles,
    run_simulation,
    thread_count,
)
from .sphere import BarycenterConfig, GeometryError


def _angle_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(p) for p in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN:MAX in degrees, got {text!r}") from None
    if not 0.0 <= lo <= hi < 180.0:
        raise argparse.ArgumentTypeError(f"need 0 <= MIN <= MAX < 180, got {text!r}")
    return lo, hi


def _aggregators(text: str) -> tuple[AggregatorKind, ...]:
    try:
        kinds = {AggregatorKind.parse(p) for p in text.split(",") if p.strip()}
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return tuple(k for k in AggregatorKind if k in kinds)


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative, got {v}")
    return v


def _nonneg_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative, got {text}")
    return v


def _add_barycenter_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tol", type=float, default=1e-10, help="Karcher update-norm tolerance (default 1e-10)")
    p.add_argument("--max-iters", type=_positive_int, default=100, help="Karcher iteration cap (default 100)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geoagg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate synthetic bundles and write geometry CSV/JSON")
    p.add_argument("--dim", type=_positive_int, default=768, help="embedding dimension (default 768)")
    p.add_argument("--samples", type=_nonneg_int, default=10_000, help="number of bundles (default 10000)")
    p.add_argument("--experts", type=int, default=2, help="experts per bundle K >= 2 (default 2)")
    p.add_argument("--angle-deg", type=_angle_range, default=(40.0, 80.0), metavar="MIN:MAX",
                   help="angle range in degrees (default 40:80)")
    p.add_argument("--norm-sigma", type=_nonneg_float, default=0.05, help="log-normal radius spread (default 0.05)")
    p.add_argument("--weights", choices=[m.value for m in WeightMode], default="equal",
                   help="gate weight mode (default equal)")
    p.add_argument("--aggregators", type=_aggregators, default=tuple(AggregatorKind),
                   help="comma list of linear,sba,norm-free,unit (default all)")
    p.add_argument("--seed", type=_nonneg_int, default=0, help="simulation seed (default 0)")
    p.add_argument("--out-dir", type=Path, required=True, help="output directory")
    p.add_argument("--emit-dump", action="store_true", help="also write the bundles to OUT_DIR/bundles.geoa")
    _add_barycenter_flags(p)

    p = sub.add_parser("analyze", help="build a geometry report from a GEOA dump")
    p.add_argument("--input", type=Path, required=True, help="GEOA file to read")
    p.add_argument("--out-dir", type=Path, required=True, help="output directory")
    p.add_argument("--aggregators", type=_aggregators, default=(),
                   help="comma list of aggregators whose collapse ratios to compute (default none)")
    p.add_argument("--strict-weights", action="store_true",
                   help="reject records whose weights do not sum to 1 (default: renormalize)")
    _add_barycenter_flags(p)

    p = sub.add_parser("moe-demo", help="run a seeded toy MoE layer under every aggregator")
    p.add_argument("--seed", type=_nonneg_int, default=0, help="layer and input seed (default 0)")
    p.add_argument("--experts", type=_positive_int, default=8, help="number of experts (default 8)")
    p.add_argument("--dim", type=_positive_int, default=64, help="model dimension D (default 64)")
    p.add_argument("--hidden", type=_positive_int, default=128, help="expert hidden size H (default 128)")
    p.add_argument("--topk", type=_positive_int, default=2, help="experts routed per input (default 2)")
    p.add_argument("--samples", type=_positive_int, default=1000, help="random inputs (default 1000)")
    p.add_argument("--out-dir", type=Path, help="optionally write moe_demo.json and layer.geop here")
    _add_barycenter_flags(p)

    p = sub.add_parser("bench", help="time linear vs SBA aggregation")
    p.add_argument("--dim", type=_positive_int, default=768, help="dimension (default 768)")
    p.add_argument("--topk", type=_positive_int, default=2, help="experts per bundle (default 2)")
    p.add_argument("--samples", type=_positive_int, default=5000, help="bundles to time (default 5000)")
    p.add_argument("--repeats", type=_positive_int, default=3, help="timing repeats; best is kept (default 3)")
    p.add_argument("--seed", type=_nonneg_int, default=0, help="bundle seed (default 0)")
    p.add_argument("--json", action="store_true", help="print machine-readable JSON")
    _add_barycenter_flags(p)
    return parser


def _bcfg(parser, args) -> BarycenterConfig:
    if not args.tol > 0:
        parser.error("argument --tol: must be positive")
    return BarycenterConfig(args.tol, args.max_iters)


def _mean_line(report) -> str:
    parts = []
    for kind in AggregatorKind:
        if kind in report.collapse_ratio:
            parts.append(f"{kind.value} mean_collapse={report.collapse_ratio[kind].mean:.9f}")
    return " ".join(parts)


def cmd_simulate(parser, args) -> int:
    if args.experts < 2:
        parser.error("argument --experts: must be at least 2")
    if not args.aggregators:
        parser.error("argument --aggregators: at least one aggregator is required")
    if args.dim < 2:
        parser.error("argument --dim: must be at least 2")
    bcfg = _bcfg(parser, args)
    lo, hi = args.angle_deg
    cfg = SimConfig(args.dim, args.samples, args.experts, lo, hi, args.norm_sigma,
                    WeightMode(args.weights), args.seed)
    report = run_simulation(cfg, args.aggregators, bcfg)
    write_report(report, args.out_dir)
    if args.emit_dump:
        header = geoa.DumpHeader(cfg.dim, cfg.experts_per_sample, cfg.num_samples)
        with open(args.out_dir / "bundles.geoa", "wb") as f:
            geoa.write_dump(header, (geoa.DumpRecord.from_bundle(b) for b in iter_bundles(cfg)), f)
    print(f"samples={report.samples} {_mean_line(report)}")
    return 0


def cmd_analyze(parser, args) -> int:
    bcfg = _bcfg(parser, args)
    report = empty_report(args.aggregators)
    with open(args.input, "rb") as f:
        _, records = geoa.read_dump(f)
        for rec in records:
            bundle = geoa.record_to_bundle(rec, renormalize=not args.strict_weights)
            accumulate_bundle(report, bundle, args.aggregators, bcfg)
    write_report(report, args.out_dir)
    print(f"samples={report.samples} {_mean_line(report)}".rstrip())
    return 0


def cmd_moe_demo(parser, args) -> int:
    if args.topk > args.experts:
        parser.error(f"argument --topk: {args.topk} exceeds --experts {args.experts}")
    bcfg = _bcfg(parser, args)
    threads = thread_count()
    base = init_layer(args.seed, args.experts, args.dim, args.hidden, args.topk)
    xs = list(np.random.default_rng([args.seed, 1]).standard_normal((args.samples, args.dim)))

    bundles = [expert_bundle(base, x)[1] for x in xs]
    radius_law = np.array([float(b.weights @ b.radii()) for b in bundles])
    stats = {}
    residual = None
    for kind in AggregatorKind:
        layer = base.with_aggregator(kind)
        try:
            ys = batch_forward(layer, xs, bcfg, threads=threads)
        except BatchError as exc:
            print(f"{kind.value}: {len(exc.errors)} failed inputs", file=sys.stderr)
            ys = exc.results
        norms = np.array([np.linalg.norm(y) for y in ys if y is not None])
        stats[kind.value] = {
            "count": int(norms.size),
            "mean_norm": float(norms.mean()),
            "std_norm": float(norms.std()),
            "min_norm": float(norms.min()),
            "max_norm": float(norms.max()),
        }
        if kind is AggregatorKind.SBA:
            ok = [i for i, y in enumerate(ys) if y is not None]
            residual = float(np.max(np.abs(norms - radius_law[ok])))

    for name, s in stats.items():
        print(f"{name:10s} n={s['count']} mean|y|={s['mean_norm']:.9g} std={s['std_norm']:.9g} "
              f"min={s['min_norm']:.9g} max={s['max_norm']:.9g}")
    print(f"sba radius-law residual max|(|y| - sum w_i r_i)| = {residual:.3e}")
    if args.out_dir is not None:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        doc = {"seed": args.seed, "experts": args.experts, "dim": args.dim, "hidden": args.hidden,
               "topk": args.topk, "samples": args.samples, "norms": stats, "sba_radius_residual": residual}
        (args.out_dir / "moe_demo.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        with open(args.out_dir / "layer.geop", "wb") as f:
            geoa.write_params(base, f)
    return 0


def bench_bundles(dim: int, k: int, n: int, seed: int) -> list[ExpertBundle]:
    """Near-unit expert outputs scattered around a common direction."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        center = rng.standard_normal(dim)
        center /= np.linalg.norm(center)
        E = center + 0.6 * rng.standard_normal((k, dim)) / np.sqrt(dim)
        E /= np.linalg.norm(E, axis=1, keepdims=True)
        E *= np.exp(0.05 * rng.standard_normal(k))[:, None]
        w = rng.dirichlet(np.ones(k))
        out.append(ExpertBundle(E, w / w.sum()))
    return out


def _time(fn, bundles, repeats) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        for b in bundles:
            fn(b)
        best = min(best, (time.perf_counter_ns() - t0) / len(bundles))
    return best


def cmd_bench(parser, args) -> int:
    bcfg = _bcfg(parser, args)
    bundles = bench_bundles(args.dim, args.topk, args.samples, args.seed)
    lin_ns = _time(linear_aggregate, bundles, args.repeats)
    sba_ns = _time(lambda b: sba_aggregate(b, bcfg), bundles, args.repeats)
    check_lin = float(sum(float(linear_aggregate(b).sum()) for b in bundles))
    check_sba = float(sum(float(sba_aggregate(b, bcfg).sum()) for b in bundles))
    doc = {
        "dim": args.dim,
        "topk": args.topk,
        "samples": args.samples,
        "linear_ns_per_op": lin_ns,
        "sba_ns_per_op": sba_ns,
        "ratio": sba_ns / lin_ns,
        "checksum_linear": check_lin,
        "checksum_sba": check_sba,
    }
    if args.json:
        print(json.dumps(doc))
    else:
        print(f"linear {lin_ns:.0f} ns/op  sba {sba_ns:.0f} ns/op  ratio {doc['ratio']:.2f}")
        print(f"checksum linear {check_lin!r} sba {check_sba!r}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
    "moe-demo": cmd_moe_demo,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        return COMMANDS[args.command](sub, args)
    except geoa.FormatError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, GeometryError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
