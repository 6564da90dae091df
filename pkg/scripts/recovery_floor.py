"""Dictionary recovery of a dense TopK SAE next to two oracle reconstructions.

Both oracles know the true active set of every held-out sample. One reads the
coefficients with a linear encoder (the true features, shrunk by the best
single scale), which is the most a tied TopK SAE with a perfect dictionary
and perfect selection could do. The other solves least squares on the support.
"""

import argparse

import numpy as np
from _runs import run_synthetic

from switch_sae.data import SyntheticSpec, generate_synthetic
from switch_sae.train import TrainConfig


def oracle_fvu(spec: SyntheticSpec, count: int = 8192):
    x, truth, active = generate_synthetic(spec, count, stream=1)
    D = truth.matrix
    var = np.mean(np.sum((x - x.mean(axis=0)) ** 2, axis=1))
    lin, lsq = [], []
    for row, idx in zip(x, active):
        cols = D[:, idx]
        lin.append((cols, cols @ (cols.T @ row), row))
        coef, *_ = np.linalg.lstsq(cols, row, rcond=None)
        lsq.append(np.sum((cols @ coef - row) ** 2))
    # best single shrinkage factor for the matched filter
    num = sum(float(r @ p) for _, p, r in lin)
    den = sum(float(p @ p) for _, p, _ in lin)
    scale = num / den
    lin_err = np.mean([np.sum((scale * p - r) ** 2) for _, p, r in lin])
    return lin_err / var, float(np.mean(lsq)) / var


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    spec = SyntheticSpec(seed=args.seed)
    lin, lsq = oracle_fvu(spec)
    print(f"oracle support + matched filter FVU {lin:.4f}")
    print(f"oracle support + least squares FVU  {lsq:.4f}")
    print(run_synthetic(spec, TrainConfig(steps=args.steps, seed=args.seed)).line())


if __name__ == "__main__":
    main()
