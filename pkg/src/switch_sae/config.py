"""JSON run configuration with strict key checking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .data import SyntheticSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    d: int = 64
    num_true_features: int = 256
    active_per_sample: int = 8
    num_clusters: int = 1
    cluster_exclusive: bool = False
    coeff_low: float = 2.0
    coeff_high: float = 4.0
    noise_sigma: float = 0.05
    feature_frequency_exponent: float = 0.0
    seed: int = 0
    count: int = 65536
    heldout_count: int = 8192

    def synthetic_spec(self) -> SyntheticSpec:
        names = {f.name for f in fields(SyntheticSpec)}
        return SyntheticSpec(**{k: v for k, v in asdict(self).items() if k in names})


@dataclass
class ModelSection:
    kind: str = "topk"
    M: int = 256
    N: int = 1
    k: int = 8
    post_relu: bool = False


@dataclass
class TrainSection:
    alpha: float = 3.0
    l1_coeff: float = 0.0
    base_lr_scale: float = 0.0128
    steps: int = 10_000
    batch_size: int = 256
    seed: int = 0
    eval_every: int = 100
    lr_decay_fraction: float = 0.2
    shuffle_buffer: int = 4096


@dataclass
class EvalSection:
    threshold: float = 0.9
    seed: int = 0


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def train_config(self, d: int | None = None) -> TrainConfig:
        m, t = self.model, self.train
        try:
            return TrainConfig(
                kind=m.kind, d=self.data.d if d is None else d, M=m.M, N=m.N, k=m.k, alpha=t.alpha,
                l1_coeff=t.l1_coeff, base_lr_scale=t.base_lr_scale, steps=t.steps, batch_size=t.batch_size,
                seed=t.seed, eval_every=t.eval_every, lr_decay_fraction=t.lr_decay_fraction,
                post_relu=m.post_relu,
            )
        except ValueError as e:
            raise ConfigError(f"model/train: {e}") from e

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def _coerce(path: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def parse_run_config(doc) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = RunConfig()
    for section, body in doc.items():
        if section not in ("data", "model", "train", "eval"):
            raise ConfigError(f"unknown key {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"{section}: expected an object")
        target = getattr(cfg, section)
        known = {f.name for f in fields(target)}
        for key, value in body.items():
            path = f"{section}.{key}"
            if key not in known:
                raise ConfigError(f"unknown key {path!r}")
            setattr(target, key, _coerce(path, value, getattr(target, key)))
    if cfg.model.kind not in ("topk", "relu", "switch"):
        raise ConfigError(f"model.kind: unknown architecture {cfg.model.kind!r}")
    try:
        cfg.data.synthetic_spec()
    except ValueError as e:
        raise ConfigError(f"data: {e}") from e
    cfg.train_config()
    return cfg


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return parse_run_config(doc)
