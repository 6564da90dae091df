"""Switch sparse autoencoders and TopK/ReLU baselines in plain numpy."""

from .model import (
    ArchSpec,
    DenseSaeParams,
    FlopReport,
    RoutingRecord,
    SparseLatents,
    SwitchSaeParams,
    flops_per_activation,
    relu_sae_forward,
    switch_sae_forward,
    topk_sae_forward,
)
from .numerics import Rng, geometric_median, softmax, topk_select
from .train import TrainConfig, train

__all__ = [
    "ArchSpec",
    "DenseSaeParams",
    "FlopReport",
    "Rng",
    "RoutingRecord",
    "SparseLatents",
    "SwitchSaeParams",
    "TrainConfig",
    "flops_per_activation",
    "geometric_median",
    "relu_sae_forward",
    "softmax",
    "switch_sae_forward",
    "topk_sae_forward",
    "topk_select",
    "train",
]
