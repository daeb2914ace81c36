"""Parameter checkpoint files.

Layout (all integers little-endian u64, all floats little-endian f32):
magic "MWCK1", then per parameter: name length, UTF-8 name, rank, dims,
raw data. Parameters are written sorted by name so files are reproducible.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"MWCK1"


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


def save_params(path, params: dict[str, Tensor]) -> None:
    chunks = [MAGIC]
    for name in sorted(params):
        data = np.ascontiguousarray(params[name].data, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into name -> float32 array (shapes preserved)."""
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:len(MAGIC)]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}

    def need(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated while reading {what}")
        piece = blob[pos:pos + n]
        pos += n
        return piece

    while pos < len(blob):
        (name_len,) = struct.unpack("<Q", need(8, "name length"))
        if name_len > 1 << 16:
            raise CheckpointError(f"{path}: implausible name length {name_len}")
        name = need(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<Q", need(8, f"rank of {name}"))
        if rank > 16:
            raise CheckpointError(f"{path}: implausible rank {rank} for {name}")
        dims = struct.unpack(f"<{rank}Q", need(8 * rank, f"dims of {name}"))
        count = 1
        for d in dims:
            count *= d
        if count > 1 << 40:
            raise CheckpointError(f"{path}: dims {dims} of {name} overflow sane sizes")
        data = np.frombuffer(need(4 * count, f"data of {name}"), dtype="<f4")
        if name in out:
            raise CheckpointError(f"{path}: duplicate parameter {name}")
        out[name] = data.reshape(dims).copy()
    return out
