"""Initialization, Adam with decoder constraints, LR schedule, and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .grad import relu_sae_backward, switch_sae_backward, topk_sae_backward
from .model import ArchSpec, DenseSaeParams, SwitchSaeParams
from .numerics import NumericalError, Rng, geometric_median

log = logging.getLogger(__name__)

Params = DenseSaeParams | SwitchSaeParams


@dataclass
class TrainConfig:
    kind: str = "topk"
    d: int = 64
    M: int = 256
    N: int = 1
    k: int = 8
    alpha: float = 3.0
    l1_coeff: float = 0.0
    base_lr_scale: float = 0.0128
    steps: int = 10_000
    batch_size: int = 256
    seed: int = 0
    eval_every: int = 100
    lr_decay_fraction: float = 0.2
    post_relu: bool = False

    def __post_init__(self):
        self.arch  # validates dimensions
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.l1_coeff < 0:
            raise ValueError("l1_coeff must be >= 0")
        if not 0.0 <= self.lr_decay_fraction <= 1.0:
            raise ValueError("lr_decay_fraction must lie in [0, 1]")
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps, batch_size and eval_every must be >= 1")

    @property
    def arch(self) -> ArchSpec:
        return ArchSpec(self.kind, self.d, self.M, self.N if self.kind == "switch" else 1, self.k)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Params, **kw) -> "AdamState":
        zeros = {n: np.zeros_like(a) for n, a in params.arrays().items()}
        return cls({n: z.copy() for n, z in zeros.items()}, zeros, **kw)


@dataclass
class TrainLogRow:
    step: int
    lr: float
    recon: float
    aux: float
    total: float
    dead_frac: float
    f: list[float] = field(default_factory=lambda: [1.0])


# --- initialization ----------------------------------------------------------


def _unit_columns(w: np.ndarray, axis: int) -> np.ndarray:
    return w / np.linalg.norm(w, axis=axis, keepdims=True)


def init_params(config: TrainConfig, init_batch, seed: int | None = None) -> Params:
    """Tied encoder/decoder init with geometric-median biases.

    Decoder columns are unit-norm Gaussian directions and each encoder row is
    the matching decoder column. The router (Switch only) is Gaussian with
    scale 1/sqrt(d); ``b_pre`` and ``b_router`` both start at the geometric
    median of ``init_batch`` but are separate arrays.
    """
    x = np.asarray(init_batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("init_batch must be a non-empty (T, d) array")
    if x.shape[1] != config.d:
        raise ValueError(f"init_batch has width {x.shape[1]}, config.d = {config.d}")
    rng = Rng(config.seed if seed is None else seed).spawn(1)
    d, M = config.d, config.M
    median = geometric_median(x)
    if config.kind == "switch":
        N = config.N
        w_dec = _unit_columns(rng.normal((N, d, M // N)), axis=1)
        w_router = rng.normal((N, d)) / math.sqrt(d)
        return SwitchSaeParams(w_dec.transpose(0, 2, 1).copy(), w_dec, w_router, median.copy(), median.copy())
    w_dec = _unit_columns(rng.normal((d, M)), axis=0)
    return DenseSaeParams(w_dec.T.copy(), w_dec, median)


# --- optimizer pieces --------------------------------------------------------


def lr_schedule(step: int, total_steps: int, M: int, base_lr_scale: float = 0.0128,
                decay_fraction: float = 0.2) -> float:
    """``base_lr_scale / sqrt(M)``, held constant, then linear to 0 over the
    final ``decay_fraction`` of training."""
    base = base_lr_scale / math.sqrt(M)
    decay_start = (1.0 - decay_fraction) * total_steps
    if step < decay_start:
        return base
    if step >= total_steps:
        return 0.0
    return base * (total_steps - step) / (total_steps - decay_start)


def adam_step(state: AdamState, params: Params, grads: Params, lr: float) -> tuple[Params, AdamState]:
    if lr < 0:
        raise ValueError("lr must be non-negative")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_params, m_out, v_out = {}, {}, {}
    g_all = grads.arrays()
    for name, p in params.arrays().items():
        g = g_all[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient {name} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        m_out[name], v_out[name] = m, v
    return type(params)(**new_params), AdamState(m_out, v_out, t, b1, b2, state.eps)


def _dec_axis(params: Params) -> int:
    return 1 if isinstance(params, SwitchSaeParams) else 0


def project_decoder_grads(params: Params, grads: Params) -> Params:
    """Remove from each decoder-column gradient its component along that column."""
    axis = _dec_axis(params)
    dec, g = params.w_dec, grads.w_dec
    along = np.sum(g * dec, axis=axis, keepdims=True)
    out = grads.copy()
    out.w_dec = g - along * dec
    return out


def renormalize_decoder(params: Params) -> Params:
    axis = _dec_axis(params)
    norms = np.linalg.norm(params.w_dec, axis=axis, keepdims=True)
    bad = np.argwhere(~(norms > 0) | ~np.isfinite(norms))
    if bad.size:
        where = tuple(int(i) for i in bad[0])
        raise NumericalError(f"decoder column at {where} has norm {float(norms[where])}")
    out = params.copy()
    out.w_dec = params.w_dec / norms
    return out


# --- loop --------------------------------------------------------------------


def backward(config: TrainConfig, params: Params, x: np.ndarray):
    """Dispatch to the right backward pass.

    Returns ``(grads, loss, total, f, fired)`` where ``total`` is the objective
    actually optimized (including the L1 term for ReLU) and ``fired`` marks the
    features active anywhere in the batch.
    """
    fired = np.zeros(config.M, dtype=bool)
    f = np.ones(1)
    if config.kind == "relu":
        grads, loss, z = relu_sae_backward(params, x, config.l1_coeff, return_latents=True)
        fired[np.any(z != 0, axis=0)] = True
        return grads, loss, loss.recon + config.l1_coeff * float(np.mean(z.sum(axis=1))), f, fired
    if config.kind == "switch":
        grads, loss, routing, lat = switch_sae_backward(
            params, x, config.k, config.alpha, config.post_relu, return_latents=True
        )
        f = routing.f
    else:
        grads, loss, lat = topk_sae_backward(params, x, config.k, config.post_relu, return_latents=True)
    fired[lat.global_indices()[lat.values != 0]] = True
    return grads, loss, loss.total, f, fired


@dataclass
class TrainResult:
    params: Params
    log: list[TrainLogRow]
    f_history: np.ndarray  # (steps, N) routed fractions per step


def train(config: TrainConfig, batches: Iterable[np.ndarray],
          on_step: Callable[..., None] | None = None) -> TrainResult:
    """Run ``config.steps`` optimizer steps over ``batches``.

    The first batch also initializes the parameters. Each step does forward and
    backward, removes decoder-parallel gradient components, takes an Adam
    step, and renormalizes decoder columns. ``on_step(step, before, grads,
    after)`` sees the projected gradients and the parameters around the update.
    """
    it = iter(batches)
    first = np.asarray(next(it), dtype=np.float64)
    params = init_params(config, first)
    state = AdamState.for_params(params)
    rows: list[TrainLogRow] = []
    N = config.N if config.kind == "switch" else 1
    f_hist = np.zeros((config.steps, N))
    fired = np.zeros(config.M, dtype=bool)
    x = first
    for step in range(config.steps):
        if step:
            x = np.asarray(next(it), dtype=np.float64)
        lr = lr_schedule(step, config.steps, config.M, config.base_lr_scale, config.lr_decay_fraction)
        grads, loss, total, f, fired_now = backward(config, params, x)
        if not math.isfinite(total) or not all(math.isfinite(g.sum()) for g in grads.arrays().values()):
            raise NumericalError(
                f"non-finite loss at step {step}: recon={loss.recon} aux={loss.aux} total={total}"
            )
        grads = project_decoder_grads(params, grads)
        new, state = adam_step(state, params, grads, lr)
        new = renormalize_decoder(new)
        if on_step is not None:
            on_step(step, params, grads, new)
        f_hist[step] = f
        fired |= fired_now
        params = new
        if (step + 1) % config.eval_every == 0:
            rows.append(TrainLogRow(step + 1, lr, loss.recon, loss.aux, total,
                                    float(1.0 - fired.mean()), [float(v) for v in f]))
            log.debug("step %d recon %.5f aux %.4f", step + 1, loss.recon, loss.aux)
            fired[:] = False
    return TrainResult(params, rows, f_hist)

