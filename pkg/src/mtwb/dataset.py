"""Binary channel dataset files.

Header (little-endian)::

    b"MTWC" | version u32
    n_x, n_y, n_subcarriers, n_clusters, n_paths : u32 each
    angle_spread_deg, max_delay, spacing           : f64 each
    count u64 | seed u64

Each record holds the channel as interleaved re/im float64 pairs
(``K * N_t`` complex entries, row-major) followed by its metadata block:
cluster angles ``(N_c, 2)``, path offsets ``(N_c, N_p, 2)``, gains as
interleaved re/im ``(N_c, N_p)`` and delays ``(N_c,)``, all float64.

The count is written as zero first and patched once every record is on disk,
so an interrupted write never looks complete.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channel import ChannelConfig, ChannelMeta, gen_channel, sample_rng

MAGIC = b"MTWC"
VERSION = 1
_HEADER = struct.Struct("<4sI5I3dQQ")
_COUNT_OFFSET = _HEADER.size - 16


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    config: ChannelConfig
    seed: int
    H: np.ndarray  # (count, K, N_t) complex
    metas: list

    def __len__(self):
        return len(self.H)


def _record_floats(config: ChannelConfig) -> int:
    nc, npth = config.n_clusters, config.n_paths
    return 2 * config.n_subcarriers * config.n_antennas + 2 * nc + 2 * nc * npth + 2 * nc * npth + nc


def _pack_header(config: ChannelConfig, count: int, seed: int) -> bytes:
    c = config
    return _HEADER.pack(MAGIC, VERSION, c.n_x, c.n_y, c.n_subcarriers, c.n_clusters, c.n_paths,
                        float(c.angle_spread_deg), float(c.max_delay), float(c.spacing), count, seed)


def _pack_record(H: np.ndarray, meta: ChannelMeta) -> bytes:
    parts = [
        H.view(np.float64).reshape(-1),
        meta.cluster_angles.reshape(-1),
        meta.path_offsets.reshape(-1),
        np.ascontiguousarray(meta.gains).view(np.float64).reshape(-1),
        meta.delays.reshape(-1),
    ]
    return np.concatenate(parts).astype("<f8").tobytes()


def _unpack_record(values: np.ndarray, config: ChannelConfig):
    K, nt, nc, npth = config.n_subcarriers, config.n_antennas, config.n_clusters, config.n_paths
    pos = 0

    def take(n):
        nonlocal pos
        chunk = values[pos:pos + n]
        pos += n
        return chunk

    H = take(2 * K * nt).copy().view(np.complex128).reshape(K, nt)
    angles = take(2 * nc).reshape(nc, 2).copy()
    offsets = take(2 * nc * npth).reshape(nc, npth, 2).copy()
    gains = take(2 * nc * npth).copy().view(np.complex128).reshape(nc, npth)
    delays = take(nc).copy()
    return H, ChannelMeta(angles, offsets, gains, delays)


def gen_dataset(config: ChannelConfig, count: int, seed: int, path) -> Path:
    """Generate ``count`` samples with per-index streams and write them to ``path``."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_pack_header(config, 0, seed))
        for i in range(count):
            sample = gen_channel(config, sample_rng(seed, i))
            fh.write(_pack_record(sample.H, sample.meta))
        fh.flush()
        fh.seek(_COUNT_OFFSET)
        fh.write(struct.pack("<Q", count))
    return path


def read_header(path):
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, version, nx, ny, k, nc, npth, spread, delay, spacing, count, seed = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    config = ChannelConfig(nx, ny, k, nc, npth, spread, delay, spacing)
    return config, count, seed


def read_dataset(path, expect_config: ChannelConfig | None = None) -> Dataset:
    """Load a dataset; raises :class:`DatasetError` on any header/record mismatch."""
    config, count, seed = read_header(path)
    if expect_config is not None and config != expect_config:
        raise DatasetError(f"{path}: stored config {config} does not match expected {expect_config}")
    per = _record_floats(config)
    values = np.fromfile(path, dtype="<f8", offset=_HEADER.size)
    if values.size != count * per:
        raise DatasetError(f"{path}: header says {count} records, file holds {values.size / per:g}")
    H = np.empty((count, config.n_subcarriers, config.n_antennas), dtype=np.complex128)
    metas = []
    for i in range(count):
        H[i], meta = _unpack_record(values[i * per:(i + 1) * per], config)
        metas.append(meta)
    return Dataset(config, seed, H, metas)
