"""Checkpoint container for one network stage.

Binary layout, all integers little-endian:
    magic "RTCK", u32 tensor count, then per tensor:
    u16 name length, UTF-8 name, u8 rank, u32 per dimension,
    float32 row-major payload.
"""
from __future__ import annotations

import io
import struct

import numpy as np

from .util import atomic_write_bytes

MAGIC = b"RTCK"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, tensors: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name!r}")
        arr = np.ascontiguousarray(array, dtype="<f4")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"tensor rank {arr.ndim} exceeds format limit")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.tobytes())
    atomic_write_bytes(path, buf.getvalue())


def _read_exact(fh, n: int, path: str, what: str) -> bytes:
    chunk = fh.read(n)
    if len(chunk) != n:
        raise CheckpointError(f"{path}: truncated while reading {what}")
    return chunk


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, path, "tensor count"))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, path, "name length"))
            name = _read_exact(fh, name_len, path, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, path, "rank"))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4, path, f"dims of {name}"))[0]
                          for _ in range(rank))
            n_items = int(np.prod(shape)) if shape else 1
            payload = _read_exact(fh, 4 * n_items, path, f"payload of {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return tensors
