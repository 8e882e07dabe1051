"""Norm-ratio and pairwise-angle diagnostics for simulated expert outputs,
written as CSV/JSON and summarized on stdout.

    python3 scripts/geometry_diagnostics.py --out-dir runs/diag [--experts 2]
"""
import argparse
from pathlib import Path

from geoagg import AggregatorKind, SimConfig, WeightMode, run_simulation
from geoagg.analysis import write_report


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out-dir", type=Path, required=True)
    ap.add_argument("--dim", type=int, default=768)
    ap.add_argument("--samples", type=int, default=10000)
    ap.add_argument("--experts", type=int, default=2)
    ap.add_argument("--sigma", type=float, default=0.05)
    ap.add_argument("--weights", choices=[m.value for m in WeightMode], default="equal")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = SimConfig(dim=args.dim, num_samples=args.samples, experts_per_sample=args.experts,
                    norm_log_sigma=args.sigma, weight_mode=WeightMode(args.weights), seed=args.seed)
    rep = run_simulation(cfg, list(AggregatorKind))
    write_report(rep, args.out_dir)
    for name, _, dist in rep.metrics():
        s = dist.summary()
        print(f"{name:>24}: n={s.count} mean={s.mean:.5f} p05={s.p05:.5f} p50={s.p50:.5f} p95={s.p95:.5f}")
    print(f"report written to {args.out_dir}")


if __name__ == "__main__":
    main()
