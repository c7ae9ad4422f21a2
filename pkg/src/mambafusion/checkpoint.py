"""Flat binary checkpoint of named parameter tensors.

Layout (all integers little-endian):
    magic b"MFCK", u32 version, u32 count
    per tensor: u32 name length, UTF-8 name, u32 rank, rank x u64 extents, float64 values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .numerics import Module

MAGIC = b"MFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dump_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def load_tensors(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after {count} tensors")
    return out


def save(model: Module, path: str | Path) -> None:
    Path(path).write_bytes(dump_tensors({n: p.value for n, p in model.named_params()}))


def load(model: Module, path: str | Path) -> None:
    """Copy stored values into ``model``; names and shapes must match exactly."""
    tensors = load_tensors(Path(path).read_bytes())
    named = dict(model.named_params())
    if set(tensors) != set(named):
        missing, extra = sorted(set(named) - set(tensors)), sorted(set(tensors) - set(named))
        raise CheckpointError(f"parameter mismatch: missing {missing}, unexpected {extra}")
    for name, arr in tensors.items():
        if arr.shape != named[name].shape:
            raise CheckpointError(f"{name}: stored shape {arr.shape} != model shape {named[name].shape}")
    for name, arr in tensors.items():
        named[name].value[...] = arr
