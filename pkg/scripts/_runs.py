"""Shared helpers for the experiment scripts."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from switch_sae.data import SyntheticSpec, generate_synthetic, memory_batches
from switch_sae.eval import ground_truth_recovery, nn_cosine_stats, reconstruction_metrics
from switch_sae.model import RoutingRecord, SwitchSaeParams, router_probs
from switch_sae.train import TrainConfig, train


@dataclass
class RunSummary:
    kind: str
    M: int
    N: int
    seed: int
    fvu: float
    mmcs: float
    dup_frac: float
    dead: float
    min_f_tail: float
    purity: float | None
    seconds: float

    def line(self) -> str:
        purity = "-" if self.purity is None else f"{self.purity:.3f}"
        return (f"{self.kind:6s} M={self.M:<5d} N={self.N:<3d} seed={self.seed}  fvu={self.fvu:.4f}  "
                f"mmcs={self.mmcs:.3f}  dup={self.dup_frac:.4f}  dead={self.dead:.3f}  "
                f"min_f={self.min_f_tail:.3f}  purity={purity}  {self.seconds:.0f}s")


def routing_purity(params: SwitchSaeParams, x, truth, active, clusters: int) -> float:
    """Share of samples sent to the expert that handles most of their cluster."""
    sel = RoutingRecord.from_probs(router_probs(params, x)).selected
    cl = truth.clusters[active[:, 0]]
    return sum(np.bincount(sel[cl == c]).max() for c in range(clusters) if np.any(cl == c)) / len(cl)


def run_synthetic(spec: SyntheticSpec, cfg: TrainConfig, count: int = 65536, heldout: int = 8192,
                  threshold: float = 0.9) -> RunSummary:
    x, truth, _ = generate_synthetic(spec, count)
    xh, _, active_h = generate_synthetic(spec, heldout, stream=1)
    t0 = time.time()
    res = train(cfg, memory_batches(x, cfg.batch_size, seed=cfg.seed))
    seconds = time.time() - t0
    k = None if cfg.kind == "relu" else cfg.k
    rep = reconstruction_metrics(res.params, xh, k, cfg.post_relu)
    dup, _, _ = nn_cosine_stats(res.params.decoder_columns(), threshold)
    mmcs, _ = ground_truth_recovery(res.params.decoder_columns().T, truth.matrix)
    tail = res.f_history[-min(1000, cfg.steps):].mean(axis=0)
    purity = None
    if cfg.kind == "switch" and spec.num_clusters > 1:
        purity = routing_purity(res.params, xh, truth, active_h, spec.num_clusters)
    return RunSummary(cfg.kind, cfg.M, cfg.N if cfg.kind == "switch" else 1, cfg.seed, rep.fvu, mmcs, dup,
                      rep.dead_feature_fraction, float(tail.min()), purity, seconds)
