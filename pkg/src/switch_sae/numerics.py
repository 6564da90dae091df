"""Small deterministic numerical kernels shared by every other module.

Everything here works in float64. Batched variants take a ``(T, n)`` array and
operate row by row; the scalar variants are thin wrappers kept for clarity and
for tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class NumericalError(ArithmeticError):
    """Raised on degenerate numerical input (zero-norm columns, non-finite loss)."""


@dataclass(frozen=True)
class SparseVector:
    dim: int
    indices: np.ndarray  # int64, strictly ascending
    values: np.ndarray

    def __post_init__(self):
        if len(self.indices) != len(self.values):
            raise ValueError("indices and values differ in length")
        if len(self.indices) > self.dim:
            raise ValueError("more entries than dim")
        if len(self.indices) and (
            np.any(np.diff(self.indices) <= 0) or self.indices[0] < 0 or self.indices[-1] >= self.dim
        ):
            raise ValueError("indices must be strictly ascending and < dim")

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def __len__(self) -> int:
        return len(self.indices)


def topk_mask(a: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row of ``a``.

    Selection is by value; ties at the k-th value go to the lowest indices.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {a.shape}")
    n = a.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range [1, {n}]")
    if k == n:
        return np.ones(a.shape, dtype=bool)
    kth = np.partition(a, n - k, axis=1)[:, n - k : n - k + 1]
    greater = a > kth
    need = k - greater.sum(axis=1, keepdims=True)
    eq = a == kth
    return greater | (eq & (np.cumsum(eq, axis=1) <= need))


def topk_batch(a: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row top-k as ``(indices, values)``, each of shape ``(T, k)``.

    Indices within a row are ascending.
    """
    a = np.asarray(a, dtype=np.float64)
    mask = topk_mask(a, k)
    idx = np.nonzero(mask)[1].reshape(a.shape[0], k)
    return idx, np.take_along_axis(a, idx, axis=1)


def topk_select(v, k: int) -> SparseVector:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("topk_select expects a vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite input")
    idx, vals = topk_batch(v[None, :], k)
    return SparseVector(len(v), idx[0], vals[0])


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def weiszfeld_iterates(points, tol: float = 1e-6, max_iter: int = 100) -> Iterator[np.ndarray]:
    """Yield the Weiszfeld iterates, starting from the coordinate-wise mean.

    When an iterate lands on a data point (distance < 1e-12) it is nudged by
    ``tol`` along the all-ones direction before the next update.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[0] == 0:
        raise ValueError("geometric median of an empty point set")
    if tol <= 0:
        raise ValueError("tol must be positive")
    nudge = np.full(pts.shape[1], tol / np.sqrt(pts.shape[1]))
    x = pts.mean(axis=0)
    yield x
    for _ in range(max_iter):
        dist = np.linalg.norm(pts - x, axis=1)
        if np.any(dist < 1e-12):
            x = x + nudge
            dist = np.linalg.norm(pts - x, axis=1)
        w = 1.0 / dist
        new = (w[:, None] * pts).sum(axis=0) / w.sum()
        moved = np.linalg.norm(new - x)
        x = new
        yield x
        if moved < tol:
            return


def geometric_median(points, tol: float = 1e-6, max_iter: int = 100) -> np.ndarray:
    x = None
    for x in weiszfeld_iterates(points, tol, max_iter):
        pass
    return x


# --- pseudo-random numbers ---------------------------------------------------


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x`` (state is advanced by the golden gamma first)."""
    z = (x + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def mix_seed(seed: int, stream: int) -> int:
    """Derive a child seed: ``splitmix64(seed XOR splitmix64(stream))``."""
    return splitmix64((seed & _MASK64) ^ splitmix64(stream & _MASK64))


def _rotl(x: np.ndarray, r: int) -> np.ndarray:
    return (x << np.uint64(r)) | (x >> np.uint64(64 - r))


class Rng:
    """Lane-parallel xoshiro256** generator.

    The stream is made of ``LANES`` independent xoshiro256** states. Lane ``j``
    is seeded with four consecutive splitmix64 outputs starting from
    ``mix_seed(seed, j)``. Each round advances every lane once and emits the
    lane outputs in lane order, so the u64 sequence is fully determined by the
    seed and reproducible in any language with 64-bit wrapping arithmetic.

    xoshiro256** update (s0..s3 the lane state)::

        out = rotl(s1 * 5, 7) * 9
        t = s1 << 17
        s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3; s2 ^= t; s3 = rotl(s3, 45)

    Floats are ``(u >> 11) * 2**-53``. Gaussians use Box-Muller on consecutive
    uniform pairs ``(u_a, u_b)``: ``r = sqrt(-2 ln(1 - u_a))`` gives
    ``r cos(2 pi u_b)`` then ``r sin(2 pi u_b)``.
    """

    LANES = 1024

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        state = np.empty((4, self.LANES), dtype=np.uint64)
        for lane in range(self.LANES):
            s = mix_seed(self.seed, lane)
            for w in range(4):
                state[w, lane] = splitmix64(s)
                s = (s + _GOLDEN) & _MASK64
        self._s = state
        self._buf = np.empty(0, dtype=np.uint64)

    def spawn(self, stream: int) -> "Rng":
        return Rng(mix_seed(self.seed, stream))

    def _round(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        out = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._s[3] = _rotl(s3, 45)
        return out

    def next_u64(self, n: int) -> np.ndarray:
        n = int(n)
        chunks = [self._buf[:n]]
        have = len(chunks[0])
        self._buf = self._buf[have:]
        while have < n:
            block = self._round()
            take = min(n - have, self.LANES)
            chunks.append(block[:take])
            self._buf = block[take:]
            have += take
        return np.concatenate(chunks) if len(chunks) > 1 else chunks[0].copy()

    def random(self, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if size is None else u.reshape(size)

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return low + (high - low) * self.random(size)

    def normal(self, size) -> np.ndarray:
        n = int(np.prod(size))
        m = (n + 1) // 2
        u = self.random(2 * m).reshape(m, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).ravel()
        return z[:n].reshape(size)

    def integers(self, high: int, size=None):
        """Uniform integers in ``[0, high)`` via floor(u * high)."""
        x = np.floor(self.random(1 if size is None else size) * high).astype(np.int64)
        return int(x[0]) if size is None else x

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random(n), kind="stable")
