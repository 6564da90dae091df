"""Duplicate-feature rate of a width-matched Switch SAE versus a dense TopK SAE.

Features are drawn from all of the dictionary with Zipf-skewed frequencies, so
the most common ones are useful to every expert.
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
    ap.add_argument("--experts", type=int, default=8)
    ap.add_argument("--zipf", type=float, default=1.0)
    ap.add_argument("--threshold", type=float, default=0.9)
    args = ap.parse_args()

    fracs = {"topk": [], "switch": []}
    for seed in args.seeds:
        spec = SyntheticSpec(feature_frequency_exponent=args.zipf, seed=seed)
        for kind in ("topk", "switch"):
            cfg = TrainConfig(kind=kind, N=args.experts, steps=args.steps, seed=seed)
            r = run_synthetic(spec, cfg, threshold=args.threshold)
            fracs[kind].append(r.dup_frac)
            print(r.line(), flush=True)
    for kind, v in fracs.items():
        print(f"{kind}: mean fraction with NN cosine > {args.threshold}: {np.mean(v):.4f}")


if __name__ == "__main__":
    main()
