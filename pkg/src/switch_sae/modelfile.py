"""Binary model files.

Layout (little-endian)::

    magic    8 bytes  b"SAEMDL1\\0"
    version  u32      1
    arch     u8       0 = topk, 1 = relu, 2 = switch
    d, M, N, k        u32 each (N = 1 and k = 0 for relu)

followed by float32 parameter blocks. Dense models: ``w_enc (M, d)``,
``w_dec (d, M)``, ``b_pre (d)``. Switch models: for each expert in ascending
order ``w_enc (M/N, d)`` then ``w_dec (d, M/N)``; then ``w_router (N, d)``,
``b_router (d)``, ``b_pre (d)``. All matrices row-major.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .data import FormatError
from .model import DenseSaeParams, SwitchSaeParams

MODEL_MAGIC = b"SAEMDL1\0"
MODEL_VERSION = 1
_HEADER = struct.Struct("<8sIBIIII")
ARCH_CODES = {"topk": 0, "relu": 1, "switch": 2}
ARCH_NAMES = {v: k for k, v in ARCH_CODES.items()}
UNIT_NORM_TOL = 1e-4


def _blocks(params) -> list[np.ndarray]:
    if isinstance(params, SwitchSaeParams):
        out = []
        for i in range(params.num_experts):
            out += [params.w_enc[i], params.w_dec[i]]
        return out + [params.w_router, params.b_router, params.b_pre]
    return [params.w_enc, params.w_dec, params.b_pre]


def model_bytes(params, kind: str, k: int) -> bytes:
    if isinstance(params, SwitchSaeParams) != (kind == "switch"):
        raise ValueError(f"parameters do not match architecture {kind!r}")
    N = params.num_experts if kind == "switch" else 1
    header = _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, ARCH_CODES[kind], params.d, params.num_features, N,
                          0 if kind == "relu" else k)
    return header + b"".join(np.ascontiguousarray(b, dtype="<f4").tobytes() for b in _blocks(params))


def save_model(path, params, kind: str, k: int) -> None:
    with open(path, "wb") as fh:
        fh.write(model_bytes(params, kind, k))


def load_model(path):
    """Returns ``(params, kind, k)`` with float64 arrays."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {MODEL_MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    _, version, code, d, M, N, k = _HEADER.unpack_from(raw)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in ARCH_NAMES:
        raise FormatError(f"{path}: unknown arch code {code}")
    kind = ARCH_NAMES[code]
    if d < 1 or M < 1 or N < 1 or M % N:
        raise FormatError(f"{path}: inconsistent dimensions d={d} M={M} N={N}")
    m = M // N
    if kind == "switch":
        shapes = [(m, d), (d, m)] * N + [(N, d), (d,), (d,)]
    else:
        shapes = [(M, d), (d, M), (d,)]
    expected = _HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != expected:
        raise FormatError(f"{path}: file is {len(raw)} bytes, header implies {expected}")
    arrays, off = [], _HEADER.size
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(s))
        off += 4 * n
    if kind == "switch":
        params = SwitchSaeParams(np.stack(arrays[0 : 2 * N : 2]), np.stack(arrays[1 : 2 * N : 2]), *arrays[2 * N :])
        norms = np.linalg.norm(params.w_dec, axis=1)
    else:
        params = DenseSaeParams(*arrays)
        norms = np.linalg.norm(params.w_dec, axis=0)
    worst = float(np.max(np.abs(norms - 1.0)))
    if worst > UNIT_NORM_TOL:
        raise FormatError(f"{path}: decoder column norm off by {worst:.2e} (tolerance {UNIT_NORM_TOL})")
    return params, kind, k
