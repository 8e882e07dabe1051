"""Output-norm statistics of a seeded toy MoE layer under each aggregator,
over several layer seeds.

    python3 scripts/moe_ablation.py [--seeds 0 1 2] [--samples 500]
"""
import argparse

import numpy as np

from geoagg import AggregatorKind, aggregate
from geoagg.moe import expert_bundle, init_layer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--samples", type=int, default=500)
    ap.add_argument("--experts", type=int, default=8)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--hidden", type=int, default=128)
    ap.add_argument("--topk", type=int, default=2)
    args = ap.parse_args()

    print(f"{'seed':>4} {'aggregator':>10} {'mean |y|':>10} {'|y|/sum w r':>12}")
    for seed in args.seeds:
        layer = init_layer(seed, args.experts, args.dim, args.hidden, args.topk)
        xs = np.random.default_rng([seed, 1]).standard_normal((args.samples, args.dim))
        bundles = [expert_bundle(layer, x)[1] for x in xs]
        for kind in AggregatorKind:
            norms, ratios = [], []
            for b in bundles:
                n = float(np.linalg.norm(aggregate(kind, b)))
                norms.append(n)
                ratios.append(n / float(b.weights @ b.radii()))
            print(f"{seed:>4} {kind.value:>10} {np.mean(norms):>10.5f} {np.mean(ratios):>12.6f}")


if __name__ == "__main__":
    main()
