"""FLOP-matched comparison on cluster-exclusive data.

A dense TopK SAE with M features against a Switch SAE with N experts and N*M
features in total, so both spend the same encoder FLOPs per activation.
"""

import argparse

import numpy as np
from _runs import run_synthetic

from switch_sae.data import SyntheticSpec
from switch_sae.train import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=10_000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--M", type=int, default=256)
    ap.add_argument("--experts", type=int, default=4)
    ap.add_argument("--features", type=int, default=256)
    ap.add_argument("--clusters", type=int, default=8)
    ap.add_argument("--alpha", type=float, default=3.0)
    args = ap.parse_args()

    fvu = {"topk": [], "switch": []}
    for seed in args.seeds:
        spec = SyntheticSpec(num_true_features=args.features, num_clusters=args.clusters,
                             cluster_exclusive=True, seed=seed)
        for kind, M in (("topk", args.M), ("switch", args.M * args.experts)):
            cfg = TrainConfig(kind=kind, M=M, N=args.experts, alpha=args.alpha, steps=args.steps, seed=seed)
            r = run_synthetic(spec, cfg)
            fvu[kind].append(r.fvu)
            print(r.line(), flush=True)
    for kind, v in fvu.items():
        print(f"{kind}: mean held-out FVU {np.mean(v):.4f}")


if __name__ == "__main__":
    main()
