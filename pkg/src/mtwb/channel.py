"""Clustered wideband channel model for a uniform planar array (UPA).

Antenna ``(i_x, i_y)`` of an ``N_x x N_y`` array sits at flat index
``i_x * N_y + i_y``.  A channel sample is the ``K x N_t`` complex matrix whose
row ``k`` is the response at subcarrier ``k``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, NumericError

NMSE_FLOOR_DB = -300.0


@dataclass(frozen=True)
class ChannelConfig:
    n_x: int = 4
    n_y: int = 4
    n_subcarriers: int = 8
    n_clusters: int = 6
    n_paths: int = 10
    angle_spread_deg: float = 3.75
    max_delay: float = 8.0
    spacing: float = 0.5

    def __post_init__(self):
        for name in ("n_x", "n_y", "n_subcarriers", "n_clusters", "n_paths"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"must be an integer >= 1, got {value!r}", name)
        if not self.angle_spread_deg >= 0:
            raise ConfigError(f"must be >= 0, got {self.angle_spread_deg}", "angle_spread_deg")
        if not self.max_delay >= 1:
            raise ConfigError(f"must be >= 1, got {self.max_delay}", "max_delay")
        if not self.spacing > 0:
            raise ConfigError(f"must be > 0, got {self.spacing}", "spacing")

    @property
    def n_antennas(self) -> int:
        return self.n_x * self.n_y

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown fields {sorted(unknown)}", "channel")
        return cls(**d)


PRESETS = {
    "paper-full": ChannelConfig(n_x=8, n_y=8, n_subcarriers=32),
    "desk": ChannelConfig(),
}


@dataclass
class ChannelMeta:
    """Random draws that fully determine one channel sample (angles in radians)."""

    cluster_angles: np.ndarray  # (N_c, 2): azimuth, elevation
    path_offsets: np.ndarray  # (N_c, N_p, 2)
    gains: np.ndarray  # (N_c, N_p) complex
    delays: np.ndarray  # (N_c,) in sample periods


@dataclass
class ChannelSample:
    H: np.ndarray
    meta: ChannelMeta = field(repr=False)


def upa_steering_uv(u, v, config: ChannelConfig) -> np.ndarray:
    """Steering vectors for direction cosines ``u`` (x axis) and ``v`` (y axis).

    Broadcasts over the shapes of ``u`` and ``v``; the antenna axis is last.
    """
    u = np.asarray(u, dtype=np.float64)[..., None]
    v = np.asarray(v, dtype=np.float64)[..., None]
    ix = np.repeat(np.arange(config.n_x), config.n_y)
    iy = np.tile(np.arange(config.n_y), config.n_x)
    phase = 2.0 * np.pi * config.spacing * (ix * u + iy * v)
    return np.exp(1j * phase) / math.sqrt(config.n_antennas)


def upa_steering(azimuth, elevation, config: ChannelConfig) -> np.ndarray:
    """Unit-norm UPA response toward (azimuth, elevation), angles in radians."""
    azimuth = np.asarray(azimuth, dtype=np.float64)
    elevation = np.asarray(elevation, dtype=np.float64)
    return upa_steering_uv(np.sin(azimuth) * np.cos(elevation), np.sin(elevation), config)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample ``index``; makes generation order-free."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def draw_meta(config: ChannelConfig, rng: np.random.Generator) -> ChannelMeta:
    nc, npth = config.n_clusters, config.n_paths
    spread = math.radians(config.angle_spread_deg)
    az = rng.uniform(-np.pi / 2, np.pi / 2, nc)
    el = rng.uniform(-np.pi / 4, np.pi / 4, nc)
    offsets = rng.uniform(-spread, spread, (nc, npth, 2))
    gains = (rng.standard_normal((nc, npth)) + 1j * rng.standard_normal((nc, npth))) / math.sqrt(2.0)
    delays = rng.uniform(0.0, config.max_delay - 1.0, nc)
    return ChannelMeta(np.stack([az, el], axis=1), offsets, gains, delays)


def channel_from_meta(meta: ChannelMeta, config: ChannelConfig) -> np.ndarray:
    """Evaluate the ``K x N_t`` channel described by ``meta``."""
    az = meta.cluster_angles[:, None, 0] + meta.path_offsets[..., 0]
    el = meta.cluster_angles[:, None, 1] + meta.path_offsets[..., 1]
    steer = upa_steering(az, el, config)  # (N_c, N_p, N_t)
    k = np.arange(config.n_subcarriers)[:, None]
    delay_phase = np.exp(-2j * np.pi * k * meta.delays[None, :] / config.n_subcarriers)  # (K, N_c)
    per_cluster = np.einsum("cp,cpn->cn", meta.gains, steer)
    # unit-power gains and unit-norm steering give E|H[k]|^2 = N_c N_p before scaling
    norm = math.sqrt(config.n_antennas / (config.n_clusters * config.n_paths))
    return norm * (delay_phase @ per_cluster)


def gen_channel(config: ChannelConfig, rng: np.random.Generator) -> ChannelSample:
    meta = draw_meta(config, rng)
    return ChannelSample(channel_from_meta(meta, config), meta)


def gen_channels(config: ChannelConfig, count: int, seed: int, start: int = 0) -> np.ndarray:
    """Channels for sample indices ``start .. start+count-1`` as ``(count, K, N_t)``."""
    out = np.empty((count, config.n_subcarriers, config.n_antennas), dtype=np.complex128)
    for i in range(count):
        out[i] = gen_channel(config, sample_rng(seed, start + i)).H
    return out


def awgn(signal, snr_db, rng: np.random.Generator, batched=False) -> np.ndarray:
    """Add circularly-symmetric complex Gaussian noise at ``snr_db``.

    Noise variance per entry is the mean signal power divided by the linear
    SNR.  With ``batched=True`` the power is measured separately for each
    index of the leading axis.  ``snr_db`` of ``None`` or ``inf`` disables
    the noise.
    """
    signal = np.asarray(signal)
    if snr_db is None or math.isinf(snr_db):
        return signal
    power = np.abs(signal) ** 2
    if batched:
        power = power.reshape(signal.shape[0], -1).mean(axis=1).reshape((-1,) + (1,) * (signal.ndim - 1))
    else:
        power = power.mean()
    var = power / 10.0 ** (snr_db / 10.0)
    noise = rng.standard_normal(signal.shape) + 1j * rng.standard_normal(signal.shape)
    return signal + np.sqrt(var / 2.0) * noise


def nmse_db(H_hat, H) -> float:
    """``10 log10 E[|H - H_hat|^2 / |H|^2]`` with the mean over the leading axis.

    Inputs of rank 2 are treated as a single sample.  A perfect estimate
    returns ``NMSE_FLOOR_DB`` instead of minus infinity.
    """
    H_hat, H = np.asarray(H_hat), np.asarray(H)
    if H_hat.shape != H.shape:
        raise ValueError(f"nmse_db: shape mismatch {H_hat.shape} vs {H.shape}")
    if H.ndim <= 2:
        H_hat, H = H_hat[None], H[None]
    ref = (np.abs(H) ** 2).reshape(H.shape[0], -1).sum(axis=1)
    if np.any(ref == 0):
        raise NumericError("nmse_db: reference channel has zero norm")
    err = (np.abs(H - H_hat) ** 2).reshape(H.shape[0], -1).sum(axis=1)
    ratio = float(np.mean(err / ref))
    if ratio == 0.0:
        return NMSE_FLOOR_DB
    return max(10.0 * math.log10(ratio), NMSE_FLOOR_DB)


def angular_energy(H, config: ChannelConfig) -> np.ndarray:
    """Energy per 2-D DFT angular bin, summed over subcarriers; shape ``(N_x, N_y)``."""
    H = np.asarray(H).reshape(-1, config.n_x, config.n_y)
    spectrum = np.fft.fft2(H, axes=(1, 2), norm="ortho")
    return (np.abs(spectrum) ** 2).sum(axis=0)


def to_real(H) -> np.ndarray:
    """Complex ``(..., n)`` to real ``(..., 2n)`` with real parts first."""
    H = np.asarray(H)
    return np.concatenate([H.real, H.imag], axis=-1)


def from_real(x) -> np.ndarray:
    x = np.asarray(x)
    n = x.shape[-1] // 2
    return x[..., :n] + 1j * x[..., n:]
