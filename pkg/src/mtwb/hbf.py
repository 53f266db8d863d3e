"""Hybrid beamforming with three transformer encoders.

Encoder 1 maps the input tokens (one per subcarrier) to a fully-digital
precoder ``F`` (``K x U x N_t``).  Encoder 2 reads ``F`` with users as tokens
and emits analog phases ``P`` (``U x N_t``), giving the frequency-flat
``F_RF = exp(jP)^T / sqrt(N_t)``.  Encoder 3 reads ``F`` per subcarrier and
emits the digital ``F_BB[k]`` (``U x U``).  The product is then scaled so
every subcarrier carries total power ``U``.

In mode 1 the input is the stacked perfect CSI of all ``U`` users.  In mode 2
each user compresses its own channel with a feedback encoder, the codewords
are quantized, and one linear layer lifts the ``U`` dequantized codewords to
the same token grid; the whole chain trains jointly.

User ``u`` receives ``H_u[k] @ w`` for precoder column ``w``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import cplx
from . import tensor as T
from .channel import ChannelConfig
from .csi import FeedbackEncoder, straight_through
from .errors import ConfigError, DimensionError, NumericError
from .training import TrainConfig, TrainResult, fit
from .transformer import encoder_forward, flop_count, init_encoder, linear, linear_params, preset_config

POWER_TOL = 1e-6


@dataclass
class HybridBeamformer:
    F: tuple  # (re, im) Tensors, (..., K, U, N_t)
    F_RF: tuple  # (..., N_t, U)
    F_BB: tuple  # (..., K, U, U)
    phases: T.Tensor  # (..., U, N_t), the analog stage's only degrees of freedom

    def analog_polar(self):
        """``(modulus, phase)`` of ``F_RF``, each ``(..., N_t, U)``.

        The modulus is structural (phases-only parameterization); the
        rectangular ``F_RF`` carries the usual cos/sin rounding, so its
        ``abs`` can differ from ``1/sqrt(N_t)`` in the last bit.
        """
        phase = np.swapaxes(self.phases.data, -1, -2)
        return np.full(phase.shape, 1.0 / math.sqrt(phase.shape[-2])), phase

    def complex(self):
        return cplx.combine(self.F), cplx.combine(self.F_RF), cplx.combine(self.F_BB)


def normalize_power(F_RF, F_BB, n_users=None):
    """Scale each ``F_BB[k]`` so that ``|F_RF F_BB[k]|_F^2 = U``.

    Accepts (re, im) Tensor pairs with ``F_RF`` of shape ``(..., N_t, R)``
    and ``F_BB`` of shape ``(..., K, R, U)``; differentiable.
    """
    U = F_BB[0].shape[-1] if n_users is None else n_users
    rf = tuple(T.reshape(p, p.shape[:-2] + (1,) + p.shape[-2:]) for p in F_RF)
    W = cplx.cmatmul(rf, F_BB)
    power = T.sum_(cplx.abs2(W), axis=(-2, -1), keepdims=True)
    if np.any(power.data == 0.0):
        raise NumericError("normalize_power: hybrid precoder has zero norm")
    scale = T.scale(T.div(1.0, T.sqrt(power)), math.sqrt(U))
    return F_BB[0] * scale, F_BB[1] * scale


def _as_pair(x):
    if isinstance(x, tuple):
        return tuple(T.as_tensor(p) for p in x)
    return cplx.split(x)


def precoder(F_RF, F_BB):
    rf = tuple(T.reshape(p, p.shape[:-2] + (1,) + p.shape[-2:]) for p in _as_pair(F_RF))
    return cplx.cmatmul(rf, _as_pair(F_BB))


def sum_rate_precoder(channels, W, noise_power=1.0, reduce=True):
    """Sum rate in bit/s/Hz for per-subcarrier precoders ``W`` (``(..., K, N_t, U)``).

    ``channels`` is ``(..., U, K, N_t)``; rates are averaged over subcarriers
    and (with ``reduce``) over any leading batch axes.  Interference from
    other users' streams is treated as noise.
    """
    Hr, Hi = _as_pair(channels)
    W = _as_pair(W)
    nd = Hr.ndim
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    Hk = (T.transpose(Hr, perm), T.transpose(Hi, perm))  # (..., K, U, N_t)
    G = cplx.abs2(cplx.cmatmul(Hk, W))  # (..., K, U, U): |H_u w_v|^2
    U = G.shape[-1]
    signal = T.sum_(G * np.eye(U), axis=-1)
    interference = T.sum_(G, axis=-1) - signal
    sinr = signal / (interference + noise_power)
    rate = T.scale(T.sum_(T.log(sinr + 1.0), axis=-1), 1.0 / math.log(2.0))  # (..., K)
    rate = T.mean(rate, axis=-1)
    return T.mean(rate) if reduce else rate


def sum_rate(channels, F_RF, F_BB, noise_power=1.0, reduce=True):
    """Sum rate of a normalized hybrid beamformer; raises if power is not ``U`` per subcarrier."""
    W = precoder(F_RF, F_BB)
    U = W[0].shape[-1]
    power = T.sum_(cplx.abs2(W), axis=(-2, -1)).data
    if np.max(np.abs(power - U)) > POWER_TOL * U:
        raise ValueError(f"sum_rate: precoder power {power.ravel()[:4]} differs from {U}; normalize first")
    return sum_rate_precoder(channels, W, noise_power, reduce)


class HBFModel:
    """Three-encoder hybrid beamformer for ``n_users`` single-antenna users."""

    def __init__(self, channel: ChannelConfig, n_users=2, preset="S", mode=1, feedback_bits=None,
                 bits_per_entry=2, seed=0, **overrides):
        if mode not in (1, 2):
            raise ConfigError(f"mode must be 1 or 2, got {mode}", "mode")
        rng = np.random.default_rng(seed)
        K, nt, U = channel.n_subcarriers, channel.n_antennas, n_users
        self.channel, self.n_users, self.mode, self.preset = channel, U, mode, preset
        self.enc1 = preset_config(preset, K, 2 * U * nt, **overrides)
        self.enc2 = preset_config(preset, U, 2 * K * nt, **overrides)
        self.enc3 = preset_config(preset, K, 2 * U * nt, **overrides)
        params = {}
        for name, cfg, out in (("e1", self.enc1, 2 * U * nt), ("e2", self.enc2, nt), ("e3", self.enc3, 2 * U * U)):
            params.update({f"{name}.{k}": v for k, v in init_encoder(cfg, rng).items()})
            params.update(linear_params(rng, cfg.d_model, out, f"{name}.head"))
        self.feedback_bits = None
        self.ue = None
        if mode == 2:
            if feedback_bits is None:
                raise ConfigError("mode 2 needs a total feedback bit budget", "feedback_bits")
            per_user = feedback_bits // U
            if per_user * U != feedback_bits or per_user % bits_per_entry:
                raise ConfigError(f"{feedback_bits} bits cannot be split into {U} users x "
                                  f"{bits_per_entry}-bit entries", "feedback_bits")
            self.feedback_bits = feedback_bits
            self.bits_per_entry = bits_per_entry
            self.n_cw = per_user // bits_per_entry
            self.ue = FeedbackEncoder(channel, self.n_cw, preset, rng, **overrides)
            params.update(self.ue.params)
            params.update(linear_params(rng, U * self.n_cw, K * 2 * U * nt, "lift"))
        self.params = params

    def scoped(self, prefix):
        n = len(prefix)
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix)}

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def flops(self) -> int:
        K, nt, U = self.channel.n_subcarriers, self.channel.n_antennas, self.n_users
        total = 0
        for cfg, out in ((self.enc1, 2 * U * nt), (self.enc2, nt), (self.enc3, 2 * U * U)):
            total += flop_count(cfg)["total"] + cfg.seq_len * cfg.d_model * out
        if self.mode == 2:
            total += U * self.ue.flops() + U * self.n_cw * K * 2 * U * nt
        return total

    def input_tokens(self, channels):
        """Mode-dependent token grid ``(..., K, 2 U N_t)`` for channels ``(..., U, K, N_t)``."""
        channels = np.asarray(channels)
        K, nt, U = self.channel.n_subcarriers, self.channel.n_antennas, self.n_users
        if channels.shape[-3:] != (U, K, nt):
            raise DimensionError(f"hbf: channels {channels.shape} do not match (U, K, N_t) = {(U, K, nt)}")
        lead = channels.shape[:-3]
        if self.mode == 1:
            stacked = np.moveaxis(channels, -3, -2).reshape(lead + (K, U * nt))
            return T.Tensor._wrap(np.concatenate([stacked.real, stacked.imag], axis=-1))
        s = self.ue(channels)  # (..., U, n_cw)
        s_hat = straight_through(s, self.bits_per_entry)
        flat = T.reshape(s_hat, lead + (U * self.n_cw,))
        return T.reshape(linear(flat, self.params, "lift"), lead + (K, 2 * U * nt))


def hbf_forward(channels, model: HBFModel) -> HybridBeamformer:
    K, nt, U = model.channel.n_subcarriers, model.channel.n_antennas, model.n_users
    x = model.input_tokens(channels)
    lead = x.shape[:-2]
    nd = len(lead)
    f = linear(encoder_forward(x, model.scoped("e1."), model.enc1), model.params, "e1.head")
    F_re = T.reshape(f[..., : U * nt], lead + (K, U, nt))
    F_im = T.reshape(f[..., U * nt:], lead + (K, U, nt))

    perm = tuple(range(nd)) + (nd + 1, nd, nd + 2)
    user_tokens = T.concat([T.reshape(T.transpose(F_re, perm), lead + (U, K * nt)),
                            T.reshape(T.transpose(F_im, perm), lead + (U, K * nt))], axis=-1)
    P = linear(encoder_forward(user_tokens, model.scoped("e2."), model.enc2), model.params, "e2.head")
    amp = 1.0 / math.sqrt(nt)
    F_RF = (T.scale(T.swap_last(T.cos(P)), amp), T.scale(T.swap_last(T.sin(P)), amp))

    bb = linear(encoder_forward(f, model.scoped("e3."), model.enc3), model.params, "e3.head")
    F_BB = (T.reshape(bb[..., : U * U], lead + (K, U, U)), T.reshape(bb[..., U * U:], lead + (K, U, U)))
    F_BB = normalize_power(F_RF, F_BB)
    return HybridBeamformer((F_re, F_im), F_RF, F_BB, P)


def hbf_rate(channels, model: HBFModel, noise_power=1.0, reduce=True):
    out = hbf_forward(channels, model)
    return sum_rate(channels, out.F_RF, out.F_BB, noise_power, reduce)


def evaluate_hbf(model: HBFModel, channels, noise_power=1.0, batch_size=256) -> float:
    rates = [hbf_rate(channels[i:i + batch_size], model, noise_power, reduce=False).data
             for i in range(0, len(channels), batch_size)]
    return float(np.mean(np.concatenate(rates)))


def train_hbf(train_ch, val_ch, model: HBFModel, hyper: TrainConfig, noise_power=1.0) -> TrainResult:
    """Maximize the mean sum rate; in mode 2 gradients reach the UE encoders straight through."""
    train_ch = np.asarray(train_ch)
    return fit(model.params, lambda idx, rng: -hbf_rate(train_ch[idx], model, noise_power), len(train_ch),
               lambda: evaluate_hbf(model, val_ch, noise_power), hyper, maximize=True)


def user_channels(H, n_users) -> np.ndarray:
    """Group consecutive single-user samples ``(N, K, N_t)`` into ``(N // U, U, K, N_t)``."""
    H = np.asarray(H)
    n = (len(H) // n_users) * n_users
    return H[:n].reshape((n // n_users, n_users) + H.shape[1:])
