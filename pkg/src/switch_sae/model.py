"""Forward passes for TopK, ReLU and Switch sparse autoencoders, plus FLOP counts.

Shapes follow the usual convention: ``x`` is ``(T, d)``, dense encoders are
``(M, d)``, dense decoders ``(d, M)`` with one feature per column. A Switch SAE
stores its experts stacked: ``w_enc`` is ``(N, M/N, d)`` and ``w_dec`` is
``(N, d, M/N)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .numerics import softmax, topk_batch

ArchKind = Literal["topk", "relu", "switch"]


class _Arrays:
    """Mixin giving dataclasses of arrays a name -> array view."""

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def map(self, fn):
        return type(self)(**{k: fn(v) for k, v in self.arrays().items()})

    def copy(self):
        return self.map(np.array)

    def zeros_like(self):
        return self.map(np.zeros_like)


@dataclass
class DenseSaeParams(_Arrays):
    w_enc: np.ndarray  # (M, d)
    w_dec: np.ndarray  # (d, M)
    b_pre: np.ndarray  # (d,)

    @property
    def d(self) -> int:
        return self.w_dec.shape[0]

    @property
    def num_features(self) -> int:
        return self.w_dec.shape[1]

    def decoder_columns(self) -> np.ndarray:
        """All features as rows, ``(M, d)``."""
        return self.w_dec.T

    def encoder_rows(self) -> np.ndarray:
        return self.w_enc

    def validate(self):
        M, d = self.w_enc.shape
        if self.w_dec.shape != (d, M) or self.b_pre.shape != (d,):
            raise ValueError(
                f"inconsistent shapes: w_enc {self.w_enc.shape}, w_dec {self.w_dec.shape}, b_pre {self.b_pre.shape}"
            )


@dataclass
class SwitchSaeParams(_Arrays):
    w_enc: np.ndarray  # (N, M/N, d)
    w_dec: np.ndarray  # (N, d, M/N)
    w_router: np.ndarray  # (N, d)
    b_router: np.ndarray  # (d,)
    b_pre: np.ndarray  # (d,)

    @property
    def d(self) -> int:
        return self.w_dec.shape[1]

    @property
    def num_experts(self) -> int:
        return self.w_enc.shape[0]

    @property
    def expert_width(self) -> int:
        return self.w_enc.shape[1]

    @property
    def num_features(self) -> int:
        return self.num_experts * self.expert_width

    def expert(self, i: int) -> DenseSaeParams:
        return DenseSaeParams(self.w_enc[i], self.w_dec[i], self.b_pre)

    def decoder_columns(self) -> np.ndarray:
        """Concatenated expert features, ``(M, d)``, expert 0 first."""
        return self.w_dec.transpose(0, 2, 1).reshape(-1, self.d)

    def encoder_rows(self) -> np.ndarray:
        return self.w_enc.reshape(-1, self.d)

    def validate(self):
        N, m, d = self.w_enc.shape
        if N < 1:
            raise ValueError("need at least one expert")
        if (
            self.w_dec.shape != (N, d, m)
            or self.w_router.shape != (N, d)
            or self.b_router.shape != (d,)
            or self.b_pre.shape != (d,)
        ):
            raise ValueError("inconsistent Switch SAE parameter shapes")


@dataclass
class SparseLatents:
    """k active features per sample. ``experts`` is set for Switch SAEs,
    in which case indices are local to the selected expert."""

    dim: int
    indices: np.ndarray  # (T, k) ascending per row
    values: np.ndarray  # (T, k)
    experts: np.ndarray | None = None

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.indices.shape[0], self.dim))
        np.put_along_axis(out, self.indices, self.values, axis=1)
        return out

    def global_indices(self) -> np.ndarray:
        if self.experts is None:
            return self.indices
        return self.indices + self.experts[:, None] * self.dim


@dataclass
class RoutingRecord:
    probs: np.ndarray  # (T, N)
    selected: np.ndarray  # (T,)
    selected_prob: np.ndarray  # (T,)
    f: np.ndarray  # (N,) fraction routed
    P: np.ndarray  # (N,) mean router probability

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "RoutingRecord":
        T, N = probs.shape
        selected = np.argmax(probs, axis=1)  # first maximum wins
        f = np.bincount(selected, minlength=N) / T
        return cls(probs, selected, probs[np.arange(T), selected], f, probs.mean(axis=0))


def _check_batch(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"activation batch must be (T, {d}), got {x.shape}")
    return x


def sparse_decode(w_dec: np.ndarray, indices: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Decoder product touching only the selected columns: ``(T, k) -> (T, d)``."""
    cols = w_dec.T[indices]  # (T, k, d)
    return np.einsum("tk,tkd->td", values, cols)


def encode_topk(w_enc, u, k: int, post_relu: bool = False):
    if not 1 <= k <= w_enc.shape[0]:
        raise ValueError(f"k={k} out of range [1, {w_enc.shape[0]}]")
    pre = u @ w_enc.T
    idx, vals = topk_batch(pre, k)
    if post_relu:
        vals = np.maximum(vals, 0.0)
    return idx, vals


def topk_sae_forward(params: DenseSaeParams, x, k: int, post_relu: bool = False):
    """Returns ``(SparseLatents, x_hat)``."""
    params.validate()
    x = _check_batch(x, params.d)
    idx, vals = encode_topk(params.w_enc, x - params.b_pre, k, post_relu)
    x_hat = sparse_decode(params.w_dec, idx, vals) + params.b_pre
    return SparseLatents(params.num_features, idx, vals), x_hat


def relu_sae_forward(params: DenseSaeParams, x):
    """Returns dense ``(z, x_hat)``."""
    params.validate()
    x = _check_batch(x, params.d)
    z = np.maximum((x - params.b_pre) @ params.w_enc.T, 0.0)
    return z, z @ params.w_dec.T + params.b_pre


def router_probs(params: SwitchSaeParams, x) -> np.ndarray:
    return softmax((x - params.b_router) @ params.w_router.T, axis=1)


def switch_sae_forward(params: SwitchSaeParams, x, k: int, post_relu: bool = False):
    """Route each sample to its most probable expert and decode there.

    Samples are grouped by expert so each expert runs one dense matmul over
    its own sub-batch. Returns ``(RoutingRecord, SparseLatents, x_hat)``.
    """
    params.validate()
    x = _check_batch(x, params.d)
    if not 1 <= k <= params.expert_width:
        raise ValueError(f"k={k} out of range [1, {params.expert_width}]")
    routing = RoutingRecord.from_probs(router_probs(params, x))
    T = x.shape[0]
    u = x - params.b_pre
    idx = np.zeros((T, k), dtype=np.int64)
    vals = np.zeros((T, k))
    x_hat = np.empty_like(x)
    for i in range(params.num_experts):
        rows = np.flatnonzero(routing.selected == i)
        if rows.size == 0:
            continue
        ei, ev = encode_topk(params.w_enc[i], u[rows], k, post_relu)
        idx[rows], vals[rows] = ei, ev
        x_hat[rows] = sparse_decode(params.w_dec[i], ei, ev)
    x_hat = routing.selected_prob[:, None] * x_hat + params.b_pre
    return routing, SparseLatents(params.expert_width, idx, vals, routing.selected), x_hat


# --- FLOP accounting ---------------------------------------------------------


@dataclass(frozen=True)
class ArchSpec:
    kind: ArchKind
    d: int
    M: int
    N: int = 1
    k: int = 0

    def __post_init__(self):
        if self.kind not in ("topk", "relu", "switch"):
            raise ValueError(f"unknown architecture {self.kind!r}")
        if self.d < 1 or self.M < 1 or self.N < 1:
            raise ValueError("dimensions must be positive")
        if self.kind == "switch" and self.M % self.N:
            raise ValueError(f"M={self.M} not divisible by N={self.N}")
        if self.kind != "relu" and not 1 <= self.k <= self.M // (self.N if self.kind == "switch" else 1):
            raise ValueError(f"k={self.k} out of range for {self.kind}")


@dataclass(frozen=True)
class FlopReport:
    encoder_flops: int
    router_flops: int
    decoder_flops: int
    bias_flops: int

    @property
    def total_flops(self) -> int:
        return self.encoder_flops + self.router_flops + self.decoder_flops + self.bias_flops

    def as_dict(self) -> dict[str, int]:
        return {**dataclasses.asdict(self), "total_flops": self.total_flops}


def flops_per_activation(arch: ArchSpec) -> FlopReport:
    """Forward FLOPs per activation vector.

    One multiply-accumulate counts as 2 FLOPs; each bias add/subtract counts d.
    Activation functions, top-k selection, softmax and comparisons are free.
    The decoder is the sparse kernel for TopK/Switch (k columns) and dense for
    ReLU, whose latents are not sparse by construction.
    """
    d, M, N, k = arch.d, arch.M, arch.N, arch.k
    if arch.kind == "switch":
        return FlopReport(2 * (M // N) * d, 2 * N * d, 2 * k * d, 3 * d)
    decoder = 2 * k * d if arch.kind == "topk" else 2 * M * d
    return FlopReport(2 * M * d, 0, decoder, 2 * d)


def matched_dense(arch: ArchSpec) -> dict[str, ArchSpec]:
    """Dense TopK counterparts of a Switch configuration.

    ``width_matched`` has the same total feature count; ``flop_matched`` has
    the width of a single expert, hence the same encoder FLOPs.
    """
    if arch.kind != "switch":
        raise ValueError("matched_dense expects a switch architecture")
    return {
        "width_matched": ArchSpec("topk", arch.d, arch.M, 1, arch.k),
        "flop_matched": ArchSpec("topk", arch.d, arch.M // arch.N, 1, min(arch.k, arch.M // arch.N)),
    }


def matched_switch(arch: ArchSpec, N: int) -> dict[str, ArchSpec]:
    """Switch counterparts of a dense TopK configuration with N experts."""
    return {
        "width_matched": ArchSpec("switch", arch.d, arch.M, N, arch.k),
        "flop_matched": ArchSpec("switch", arch.d, arch.M * N, N, arch.k),
    }
