"""Bit-level CSI feedback autoencoder.

UE side: subcarrier tokens -> transformer encoder -> flatten -> linear ->
sigmoid codeword in (0, 1) -> uniform scalar quantizer -> bitstream.
BS side: dequantized codeword -> linear expansion to ``K`` tokens ->
transformer encoder of the same shape -> per-token linear head -> channel.

The quantizer uses ``2^B`` equal cells on [0, 1] with mid-point
reconstruction levels; bits are emitted most significant first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cplx
from . import tensor as T
from .channel import ChannelConfig, nmse_db
from .errors import DimensionError
from .training import TrainConfig, TrainResult, fit
from .transformer import EncoderConfig, encoder_forward, flop_count, init_encoder, linear, linear_params, preset_config


class QuantizerDomainError(ValueError):
    pass


# ---------------------------------------------------------------- quantizer


def _check_bits(B):
    if int(B) != B or B < 1:
        raise QuantizerDomainError(f"bit width must be an integer >= 1, got {B}")


def quantize_indices(s, B) -> np.ndarray:
    _check_bits(B)
    s = np.asarray(s, dtype=np.float64)
    if np.any(~np.isfinite(s)) or np.any(s < 0.0) or np.any(s > 1.0):
        raise QuantizerDomainError("quantizer input must lie in [0, 1]")
    levels = 1 << int(B)
    return np.minimum(np.floor(s * levels), levels - 1).astype(np.int64)


def quantize(s, B) -> np.ndarray:
    """Bitstream ``(..., N_cw * B)`` of 0/1 values, MSB first per entry."""
    idx = quantize_indices(s, B)
    shifts = np.arange(int(B) - 1, -1, -1)
    bits = (idx[..., None] >> shifts) & 1
    return bits.reshape(idx.shape[:-1] + (idx.shape[-1] * int(B),)).astype(np.uint8)


def dequantize(bits, B) -> np.ndarray:
    _check_bits(B)
    bits = np.asarray(bits)
    if bits.shape[-1] % int(B):
        raise QuantizerDomainError(f"bitstream length {bits.shape[-1]} is not a multiple of {B}")
    groups = bits.reshape(bits.shape[:-1] + (bits.shape[-1] // int(B), int(B))).astype(np.int64)
    idx = (groups << np.arange(int(B) - 1, -1, -1)).sum(axis=-1)
    return (idx + 0.5) / (1 << int(B))


def quantize_dequantize(s, B) -> np.ndarray:
    return (quantize_indices(s, B) + 0.5) / (1 << int(B))


def straight_through(s, B):
    """Quantize-dequantize forward, identity backward.  ``B=None`` is a no-op."""
    if B is None:
        return T.as_tensor(s)
    return T.straight_through(s, lambda x: quantize_dequantize(x, B))


def pack_bits(bits) -> bytes:
    """Pack a 0/1 bitstream into bytes, MSB first, zero-padded at the end."""
    return np.packbits(np.asarray(bits, dtype=np.uint8).reshape(-1)).tobytes()


def unpack_bits(data: bytes, count: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:count]


# ---------------------------------------------------------------- model


def channel_tokens(H):
    """Complex ``(..., K, N_t)`` channel (array or Tensor pair) to real tokens."""
    if isinstance(H, tuple):
        return cplx.to_tokens(H)
    if isinstance(H, T.Tensor):
        return H
    return T.Tensor._wrap(np.concatenate([np.real(H), np.imag(H)], axis=-1))


class FeedbackEncoder:
    """UE side: transformer features of the subcarrier tokens compressed to ``n_cw`` reals."""

    def __init__(self, channel: ChannelConfig, n_cw, preset="S", rng=None, prefix="ue.", **overrides):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channel = channel
        self.n_cw = n_cw
        self.prefix = prefix
        K, nt = channel.n_subcarriers, channel.n_antennas
        self.encoder = preset_config(preset, K, 2 * nt, **overrides)
        self.params = {f"{prefix}{k}": v for k, v in init_encoder(self.encoder, rng).items()}
        self.params.update(linear_params(rng, K * self.encoder.d_model, n_cw, f"{prefix}compress"))

    def __call__(self, H):
        x = channel_tokens(H)
        K, nt = self.channel.n_subcarriers, self.channel.n_antennas
        if x.shape[-2:] != (K, 2 * nt):
            raise DimensionError(f"csi_encode: tokens {x.shape} do not match (K, 2 N_t) = {(K, 2 * nt)}")
        n = len(self.prefix)
        enc_params = {k[n:]: v for k, v in self.params.items() if k.startswith(self.prefix)}
        feats = encoder_forward(x, enc_params, self.encoder, use_positions=True)
        flat = T.reshape(feats, feats.shape[:-2] + (feats.shape[-2] * feats.shape[-1],))
        return T.sigmoid(linear(flat, self.params, f"{self.prefix}compress"))

    def flops(self) -> int:
        return flop_count(self.encoder)["total"] + self.channel.n_subcarriers * self.encoder.d_model * self.n_cw


class FeedbackDecoder:
    """BS side: codeword expanded to ``K`` tokens and decoded by a mirrored encoder stack."""

    def __init__(self, channel: ChannelConfig, n_cw, preset="S", rng=None, prefix="bs.", **overrides):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channel = channel
        self.n_cw = n_cw
        self.prefix = prefix
        K, nt = channel.n_subcarriers, channel.n_antennas
        self.encoder = preset_config(preset, K, 2 * nt, **overrides)
        self.params = linear_params(rng, n_cw, K * 2 * nt, f"{prefix}expand")
        self.params.update({f"{prefix}{k}": v for k, v in init_encoder(self.encoder, rng).items()})
        self.params.update(linear_params(rng, self.encoder.d_model, 2 * nt, f"{prefix}out"))

    def __call__(self, s_hat):
        s_hat = T.as_tensor(s_hat)
        if s_hat.shape[-1] != self.n_cw:
            raise DimensionError(f"csi_decode: codeword length {s_hat.shape[-1]} != {self.n_cw}")
        K, nt = self.channel.n_subcarriers, self.channel.n_antennas
        x = T.reshape(linear(s_hat, self.params, f"{self.prefix}expand"), s_hat.shape[:-1] + (K, 2 * nt))
        n = len(self.prefix)
        enc_params = {k[n:]: v for k, v in self.params.items() if k.startswith(self.prefix)}
        feats = encoder_forward(x, enc_params, self.encoder, use_positions=True)
        return linear(feats, self.params, f"{self.prefix}out")

    def flops(self) -> int:
        K, nt = self.channel.n_subcarriers, self.channel.n_antennas
        return self.n_cw * K * 2 * nt + flop_count(self.encoder)["total"] + K * self.encoder.d_model * 2 * nt


class TransformerFeedback:
    """Transformer feedback autoencoder with ``n_cw`` codeword entries of ``bits`` bits."""

    def __init__(self, channel: ChannelConfig, n_cw, bits, preset="S", seed=0, **overrides):
        rng = np.random.default_rng(seed)
        self.channel = channel
        self.n_cw = n_cw
        self.bits = bits
        self.preset = preset
        self.name = f"Transformer-{preset}"
        self.ue = FeedbackEncoder(channel, n_cw, preset, rng, **overrides)
        self.bs = FeedbackDecoder(channel, n_cw, preset, rng, **overrides)
        self.params = {**self.ue.params, **self.bs.params}

    def encode(self, H):
        return self.ue(H)

    def decode(self, s_hat):
        return self.bs(s_hat)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def flops(self) -> int:
        return self.ue.flops() + self.bs.flops()


@dataclass
class FeedbackCodeword:
    s: np.ndarray
    bits: np.ndarray
    s_hat: np.ndarray


def csi_encode(H, model) -> np.ndarray:
    return model.encode(H).data


def csi_decode(s_hat, model) -> np.ndarray:
    return cplx.combine(cplx.from_tokens(model.decode(s_hat)))


def feedback(H, model) -> FeedbackCodeword:
    """Run the UE side and the quantizer on channels ``H``."""
    s = csi_encode(H, model)
    bits = quantize(s, model.bits)
    return FeedbackCodeword(s, bits, dequantize(bits, model.bits))


def reconstruct(H, model, bits="model"):
    """Tape-friendly end-to-end reconstruction as real tokens ``(..., K, 2 N_t)``."""
    B = model.bits if bits == "model" else bits
    return model.decode(straight_through(model.encode(H), B))


def csi_loss(H, model, bits="model"):
    target = np.concatenate([H.real, H.imag], axis=-1)
    diff = reconstruct(H, model, bits) - target
    return (diff * diff).mean()


def evaluate_csi(model, H, bits="model", batch_size=256) -> float:
    out = [cplx.combine(cplx.from_tokens(reconstruct(H[i:i + batch_size], model, bits)))
           for i in range(0, len(H), batch_size)]
    return nmse_db(np.concatenate(out), H)


def train_csi(train_H, val_H, model, hyper: TrainConfig, bits="model") -> TrainResult:
    """End-to-end MSE training through the straight-through quantizer.

    Works for any model exposing ``encode``, ``decode``, ``params`` and
    ``bits``; pass ``bits=None`` to train without quantization.
    """
    train_H = np.asarray(train_H)
    return fit(model.params, lambda idx, rng: csi_loss(train_H[idx], model, bits), len(train_H),
               lambda: evaluate_csi(model, val_H, bits), hyper)
