"""Collapse ratio of linear vs spherical aggregation as a function of the
angle between two equal-norm experts, plus a Monte Carlo check against
the closed form cos(phi/2).

    python3 scripts/collapse_sweep.py [--dim 768] [--samples 20000]
"""
import argparse
import math

import numpy as np

from geoagg import AggregatorKind, ExpertBundle, SimConfig, aggregate, collapse_ratio, run_simulation


def pair(rng, dim, phi):
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    v = rng.standard_normal(dim)
    v -= (u @ v) * u
    v /= np.linalg.norm(v)
    return u, math.cos(phi) * u + math.sin(phi) * v


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dim", type=int, default=768)
    ap.add_argument("--samples", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    print(f"{'angle':>6} {'linear':>10} {'cos(phi/2)':>11} {'sba':>8} {'norm-free':>10}")
    for deg in range(0, 180, 15):
        u, v = pair(rng, args.dim, math.radians(deg))
        b = ExpertBundle([u, v], [0.5, 0.5])
        row = [collapse_ratio(b, aggregate(k, b)) for k in (AggregatorKind.LINEAR, AggregatorKind.SBA, AggregatorKind.NORM_FREE)]
        print(f"{deg:>6} {row[0]:>10.6f} {math.cos(math.radians(deg) / 2):>11.6f} {row[1]:>8.5f} {row[2]:>10.5f}")

    cfg = SimConfig(dim=args.dim, num_samples=args.samples, norm_log_sigma=0.0, seed=args.seed)
    rep = run_simulation(cfg, [AggregatorKind.LINEAR, AggregatorKind.SBA])
    lo, hi = math.radians(cfg.angle_deg_min), math.radians(cfg.angle_deg_max)
    # E[cos(phi/2)] for phi ~ U(lo, hi)
    expected = 2.0 * (math.sin(hi / 2) - math.sin(lo / 2)) / (hi - lo)
    for kind in (AggregatorKind.LINEAR, AggregatorKind.SBA):
        s = rep.collapse(kind).summary()
        print(f"{kind.value:>6}: mean {s.mean:.6f} sd {s.stddev:.6f} min {s.min:.6f} max {s.max:.6f}")
    print(f"expected linear mean {expected:.6f}")


if __name__ == "__main__":
    main()
