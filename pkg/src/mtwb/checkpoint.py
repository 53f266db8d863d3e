"""Flat binary parameter container.

Layout (all integers little-endian)::

    b"MTWB" | version u32
    per record: name_len u32 | name utf-8 | rank u32 | extents u64 * rank | float64 data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MTWB"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION))
        for name, value in params.items():
            arr = np.ascontiguousarray(getattr(value, "data", value), dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 8
    out = {}
    while pos < len(blob):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * count > len(blob):
            raise CheckpointError(f"{path}: truncated record {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    return out
