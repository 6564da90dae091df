"""Reconstruction metrics and decoder-geometry diagnostics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .grad import aux_loss
from .model import DenseSaeParams, SwitchSaeParams, relu_sae_forward, switch_sae_forward, topk_sae_forward
from .numerics import Rng


@dataclass
class EvalReport:
    mse: float
    fvu: float
    mean_l0: float
    dead_feature_fraction: float
    aux_loss: float
    f: list[float]

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class GeometryReport:
    threshold: float
    fraction_above_threshold: float
    mean_nn_cosine: float
    nn_cosine: list[float]
    cross_expert_matrix: list[list[float]] | None
    random_block_baseline: float | None

    def as_dict(self) -> dict:
        return asdict(self)


def reconstruct(params, x, k: int | None = None, post_relu: bool = False):
    """Returns ``(x_hat, fired_counts_per_sample, fired_features, aux, f)``."""
    if isinstance(params, SwitchSaeParams):
        routing, lat, x_hat = switch_sae_forward(params, x, k, post_relu)
        nz = lat.values != 0
        fired = np.zeros(params.num_features, dtype=bool)
        fired[lat.global_indices()[nz]] = True
        return x_hat, nz.sum(axis=1), fired, aux_loss(routing.f, routing.P), routing.f
    if k is None:
        z, x_hat = relu_sae_forward(params, x)
        nz = z != 0
        return x_hat, nz.sum(axis=1), nz.any(axis=0), 0.0, np.ones(1)
    lat, x_hat = topk_sae_forward(params, x, k, post_relu)
    nz = lat.values != 0
    fired = np.zeros(params.num_features, dtype=bool)
    fired[lat.indices[nz]] = True
    return x_hat, nz.sum(axis=1), fired, 0.0, np.ones(1)


def reconstruction_metrics(params, x, k: int | None = None, post_relu: bool = False) -> EvalReport:
    """MSE, FVU, L0 and dead-feature fraction over ``x``.

    ``k=None`` selects the ReLU forward pass for dense parameters. A feature
    is dead if it never fires anywhere in ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("evaluation data must be a non-empty (T, d) array")
    x_hat, l0, fired, aux, f = reconstruct(params, x, k, post_relu)
    mse = float(np.mean(np.sum((x - x_hat) ** 2, axis=1)))
    var = float(np.mean(np.sum((x - x.mean(axis=0)) ** 2, axis=1)))
    fvu = mse / var if var > 0 else (0.0 if mse == 0 else float("inf"))
    return EvalReport(mse, fvu, float(l0.mean()), float(1.0 - fired.mean()), aux, [float(v) for v in f])


# --- geometry ------------------------------------------------------------------


def _unit_rows(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def nn_cosine_stats(features: np.ndarray, threshold: float = 0.9):
    """Nearest-neighbour cosine for every feature (rows of ``features``).

    Returns ``(fraction_above, mean_nn_cosine, per_feature)``; the fraction
    counts features whose best match (self excluded) exceeds ``threshold``.
    """
    f = _unit_rows(features)
    if f.shape[0] < 2:
        raise ValueError("need at least two features")
    sims = np.clip(f @ f.T, -1.0, 1.0)
    np.fill_diagonal(sims, -np.inf)
    nn = sims.max(axis=1)
    return float(np.mean(nn > threshold)), float(nn.mean()), nn


def block_similarity(blocks: list[np.ndarray]) -> np.ndarray:
    """Entry (a, b): mean over rows of block a of the best cosine in block b.

    Diagonal is 1 by convention.
    """
    units = [_unit_rows(b) for b in blocks]
    n = len(units)
    out = np.ones((n, n))
    for a in range(n):
        for b in range(n):
            if a != b:
                out[a, b] = np.clip(units[a] @ units[b].T, -1.0, 1.0).max(axis=1).mean()
    return out


def cross_expert_similarity(params: SwitchSaeParams) -> np.ndarray:
    if params.num_experts < 2:
        raise ValueError("need at least two experts")
    return block_similarity([params.w_dec[i].T for i in range(params.num_experts)])


def random_block_baseline(features: np.ndarray, N: int, seed: int = 0) -> float:
    """Mean off-diagonal block similarity after a random split into N equal blocks."""
    M = features.shape[0]
    if N < 2 or M % N:
        raise ValueError(f"cannot split {M} features into {N} equal blocks (N >= 2)")
    perm = Rng(seed).permutation(M)
    blocks = np.split(np.asarray(features)[perm], N)
    sim = block_similarity(blocks)
    return float(sim[~np.eye(N, dtype=bool)].mean())


def ground_truth_recovery(learned: np.ndarray, truth: np.ndarray):
    """Mean max cosine of each true feature against learned ones (signed).

    Both arguments hold features as columns, ``(d, F)`` and ``(d, M)``.
    """
    learned, truth = np.asarray(learned), np.asarray(truth)
    if learned.shape[0] != truth.shape[0]:
        raise ValueError(f"dimension mismatch: {learned.shape[0]} vs {truth.shape[0]}")
    sims = np.clip(_unit_rows(truth.T) @ _unit_rows(learned.T).T, -1.0, 1.0)
    best = sims.max(axis=1)
    return float(best.mean()), best


def geometry_report(params, threshold: float = 0.9, baseline_features: np.ndarray | None = None,
                    blocks: int | None = None, seed: int = 0) -> GeometryReport:
    """Duplicate-feature and expert-specialization summary for one model.

    For Switch models the random-block baseline uses ``baseline_features`` if
    given (a dense decoder of the same size) and otherwise seeded random unit
    vectors of matching shape. For dense models pass ``blocks`` to get the
    baseline over that many random blocks of the model's own decoder.
    """
    feats = params.decoder_columns()
    frac, mean_nn, nn = nn_cosine_stats(feats, threshold)
    cross, baseline = None, None
    if isinstance(params, SwitchSaeParams) and params.num_experts > 1:
        cross = cross_expert_similarity(params).tolist()
        if baseline_features is None:
            baseline_features = Rng(seed).normal(feats.shape)
        baseline = random_block_baseline(baseline_features, params.num_experts, seed)
    elif blocks and blocks > 1:
        baseline = random_block_baseline(feats, blocks, seed)
    return GeometryReport(threshold, frac, mean_nn, nn.tolist(), cross, baseline)
