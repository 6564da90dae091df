"""Activation files, batch iteration, and synthetic superposition data.

Activation file layout (little-endian)::

    offset  size  field
    0       8     magic b"SAEACT1\\0"
    8       4     version (u32, = 1)
    12      4     d (u32)
    16      8     count (u64)
    24      1     dtype code (u8, 0 = float32)
    25      7     reserved, zero
    32      ...   count * d float32 values, row-major
"""

from __future__ import annotations

import os
import struct
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .numerics import Rng

ACT_MAGIC = b"SAEACT1\0"
ACT_VERSION = 1
_ACT_HEADER = struct.Struct("<8sIIQB7x")
DTYPE_F32 = 0


class FormatError(ValueError):
    """Malformed activation or model file."""


# --- binary activation files --------------------------------------------------


def write_activations(path, batch) -> None:
    x = np.asarray(batch)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError(f"expected a (count, d) array, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("activations must be finite")
    with open(path, "wb") as fh:
        fh.write(_ACT_HEADER.pack(ACT_MAGIC, ACT_VERSION, x.shape[1], x.shape[0], DTYPE_F32))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


class ActivationReader:
    """Streaming reader over an activation file.

    The header and file size are validated on open; rows are then read in
    chunks, never the whole payload at once.
    """

    def __init__(self, path, chunk_rows: int = 4096):
        self.path = os.fspath(path)
        self.chunk_rows = chunk_rows
        with open(self.path, "rb") as fh:
            raw = fh.read(_ACT_HEADER.size)
        if len(raw) < 8 or raw[:8] != ACT_MAGIC:
            raise FormatError(f"{self.path}: bad magic {raw[:8]!r}, expected {ACT_MAGIC!r}")
        if len(raw) < _ACT_HEADER.size:
            raise FormatError(f"{self.path}: truncated header ({len(raw)} of {_ACT_HEADER.size} bytes)")
        _, version, d, count, dtype = _ACT_HEADER.unpack(raw)
        if version != ACT_VERSION:
            raise FormatError(f"{self.path}: unsupported version {version}")
        if dtype != DTYPE_F32:
            raise FormatError(f"{self.path}: dtype code {dtype} unsupported (expected {DTYPE_F32})")
        if d < 1:
            raise FormatError(f"{self.path}: d must be >= 1")
        expected = count * d * 4
        actual = os.path.getsize(self.path) - _ACT_HEADER.size
        if actual != expected:
            raise FormatError(f"{self.path}: payload is {actual} bytes, header implies {expected}")
        self.d, self.count = d, count

    def chunks(self) -> Iterator[np.ndarray]:
        with open(self.path, "rb") as fh:
            fh.seek(_ACT_HEADER.size)
            left = self.count
            while left:
                n = min(left, self.chunk_rows)
                buf = fh.read(n * self.d * 4)
                if len(buf) != n * self.d * 4:
                    raise FormatError(f"{self.path}: short read")
                yield np.frombuffer(buf, dtype="<f4").reshape(n, self.d)
                left -= n

    def __iter__(self) -> Iterator[np.ndarray]:
        for chunk in self.chunks():
            yield from chunk

    def read_all(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros((0, self.d), dtype=np.float32)
        return np.concatenate(list(self.chunks()))


def read_activations(path) -> ActivationReader:
    return ActivationReader(path)


class ArraySource:
    """In-memory stand-in for ``ActivationReader``."""

    def __init__(self, x):
        self.x = np.asarray(x)
        self.count, self.d = self.x.shape

    def chunks(self):
        yield self.x

    def __iter__(self):
        return iter(self.x)


def batch_iterator(reader, batch_size: int, shuffle_buffer: int = 1, seed: int = 0,
                   epochs: int | None = 1) -> Iterator[np.ndarray]:
    """Yield ``(batch_size, d)`` float64 batches.

    Rows pass through a swap buffer of ``shuffle_buffer`` slots: once full, each
    incoming row replaces a uniformly chosen slot whose row is emitted. At the
    end of the last epoch the buffer drains in random order. ``epochs=None``
    repeats the file forever. A trailing partial batch is dropped.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if shuffle_buffer < 1:
        raise ValueError("shuffle_buffer must be >= 1")
    if batch_size > reader.count:
        raise ValueError(f"batch_size {batch_size} exceeds the {reader.count} rows available")
    rng = Rng(seed)
    buf: list[np.ndarray] = []
    out = np.empty((batch_size, reader.d))
    filled = 0
    epoch = 0
    while epochs is None or epoch < epochs:
        for chunk in reader.chunks():
            slots = rng.integers(shuffle_buffer, len(chunk))
            for row, slot in zip(chunk, slots):
                if len(buf) < shuffle_buffer:
                    buf.append(row)
                    continue
                out[filled] = buf[slot]
                buf[slot] = row
                filled += 1
                if filled == batch_size:
                    yield out.copy()
                    filled = 0
        epoch += 1
    for j in rng.permutation(len(buf)):
        out[filled] = buf[j]
        filled += 1
        if filled == batch_size:
            yield out.copy()
            filled = 0


def memory_batches(x, batch_size: int, seed: int = 0) -> Iterator[np.ndarray]:
    """Endless shuffled batches from an in-memory array, reshuffled each epoch."""
    x = np.asarray(x, dtype=np.float64)
    if batch_size > len(x):
        raise ValueError(f"batch_size {batch_size} exceeds the {len(x)} rows available")
    rng = Rng(seed)
    while True:
        perm = rng.permutation(len(x))
        for start in range(0, len(x) - batch_size + 1, batch_size):
            yield x[perm[start : start + batch_size]]


# --- synthetic data ----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
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

    def __post_init__(self):
        if self.d < 1 or self.num_true_features < 1:
            raise ValueError("d and num_true_features must be >= 1")
        if not 1 <= self.active_per_sample <= self.num_true_features:
            raise ValueError("active_per_sample must lie in [1, num_true_features]")
        if self.num_clusters < 1:
            raise ValueError("num_clusters must be >= 1")
        if self.coeff_low > self.coeff_high:
            raise ValueError("coeff_low must not exceed coeff_high")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.cluster_exclusive:
            smallest = self.num_true_features // self.num_clusters
            if self.active_per_sample > smallest:
                raise ValueError(
                    f"active_per_sample={self.active_per_sample} exceeds the smallest cluster size {smallest}"
                )

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruthDictionary:
    matrix: np.ndarray  # (d, F), unit-norm columns
    clusters: np.ndarray  # (F,) cluster of each feature
    weights: np.ndarray  # (F,) unnormalized selection weights


def make_dictionary(spec: SyntheticSpec) -> GroundTruthDictionary:
    """Features are assigned round-robin to clusters; feature j has Zipf rank
    ``j // C`` inside its cluster, weight ``(rank + 1) ** -exponent``."""
    rng = Rng(spec.seed).spawn(0)
    F, C = spec.num_true_features, spec.num_clusters
    mat = rng.normal((spec.d, F))
    mat /= np.linalg.norm(mat, axis=0, keepdims=True)
    j = np.arange(F)
    return GroundTruthDictionary(mat, j % C, (j // C + 1.0) ** -spec.feature_frequency_exponent)


def _weighted_choice(rng: Rng, logw: np.ndarray, s: int) -> np.ndarray:
    """Weighted sampling of s columns per row without replacement.

    Exponential-race keys ``log(u) / w``; entries with ``logw = -inf`` are
    never chosen. Result columns are sorted ascending.
    """
    u = rng.random(logw.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        keys = np.where(np.isfinite(logw), np.log1p(-u) / np.exp(logw), -np.inf)
    idx = np.argpartition(-keys, s - 1, axis=1)[:, :s]
    return np.sort(idx, axis=1)


def generate_synthetic(spec: SyntheticSpec, count: int, stream: int = 0, chunk: int = 8192):
    """Sample ``count`` activations.

    Returns ``(x, truth, active)`` with ``x`` of shape ``(count, d)``,
    ``active`` the ``(count, s)`` feature indices used per sample. The
    dictionary depends only on ``spec``; ``stream`` selects an independent
    sample sequence over the same dictionary (e.g. 1 for held-out data).
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    truth = make_dictionary(spec)
    rng = Rng(spec.seed).spawn(1 + stream)
    F, C, s = spec.num_true_features, spec.num_clusters, spec.active_per_sample
    logw = np.log(truth.weights)
    xs, acts = [], []
    for start in range(0, count, chunk):
        n = min(chunk, count - start)
        cl = rng.integers(C, n)
        if spec.cluster_exclusive:
            lw = np.where(truth.clusters[None, :] == cl[:, None], logw[None, :], -np.inf)
        else:
            lw = np.broadcast_to(logw, (n, F))
        active = _weighted_choice(rng, lw, s)
        coeffs = rng.uniform(spec.coeff_low, spec.coeff_high, (n, s))
        x = np.einsum("ns,nsd->nd", coeffs, truth.matrix.T[active])
        if spec.noise_sigma > 0:
            x += spec.noise_sigma * rng.normal((n, spec.d))
        xs.append(x)
        acts.append(active)
    if not xs:
        return np.zeros((0, spec.d)), truth, np.zeros((0, s), dtype=np.int64)
    return np.concatenate(xs), truth, np.concatenate(acts)
