"""Flat binary checkpoint format.

Layout (all integers little-endian unsigned 32-bit, floats little-endian
IEEE-754 64-bit):

    magic       5 bytes, ASCII "COAE1"
    repeated until EOF, one record per named parameter, in write order:
        name_len    u32
        name        name_len bytes, UTF-8
        rank        u32
        dims        rank * u32
        values      prod(dims) * f64, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"COAE1"


class CheckpointError(ValueError):
    pass


def save(params: dict[str, Tensor], path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, t in params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", t.data.ndim))
            f.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            f.write(t.data.astype("<f8").tobytes())


def load(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
        out: dict[str, np.ndarray] = {}
        while True:
            head = f.read(4)
            if not head:
                return out
            (name_len,) = struct.unpack("<I", head)
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            raw = f.read(8 * n)
            if len(raw) != 8 * n:
                raise CheckpointError(f"{path}: truncated record for {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)


def restore(params: dict[str, Tensor], path: str | Path) -> None:
    """Load a checkpoint into an existing parameter dict, in place."""
    loaded = load(path)
    missing = set(params) - set(loaded)
    extra = set(loaded) - set(params)
    if missing or extra:
        raise CheckpointError(
            f"{path}: parameter set mismatch (missing {sorted(missing)}, unexpected {sorted(extra)})"
        )
    for name, t in params.items():
        if loaded[name].shape != t.data.shape:
            raise CheckpointError(
                f"{path}: shape {loaded[name].shape} for {name!r}, expected {t.data.shape}"
            )
        t.data = loaded[name].copy()
