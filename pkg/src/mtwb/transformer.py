"""Transformer encoder: embedding, sinusoidal positions, multi-head attention,
position-wise feed-forward and post-norm residual layers.

Parameters live in flat ``name -> Tensor`` dicts so they can be checkpointed
directly.  Names follow ``embed.w``, ``layer{i}.head{j}.wq``, ``layer{i}.wo``,
``layer{i}.ff1.w`` and so on.  Every function accepts a leading batch axis.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

MODEL_PRESETS = {
    "S": dict(n_layers=2, d_model=64, n_heads=4),
    "M": dict(n_layers=4, d_model=128, n_heads=8),
    "L": dict(n_layers=6, d_model=256, n_heads=8),
}


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int
    d_model: int
    n_heads: int
    seq_len: int
    in_features: int
    d_ff: int | None = None

    def __post_init__(self):
        for name in ("d_model", "n_heads", "seq_len", "in_features"):
            if getattr(self, name) < 1:
                raise ConfigError(f"must be >= 1, got {getattr(self, name)}", name)
        if self.n_layers < 0:
            raise ConfigError(f"must be >= 0, got {self.n_layers}", "n_layers")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}", "n_heads")
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    d_v = d_k

    def to_dict(self):
        return asdict(self)


def preset_config(preset: str, seq_len: int, in_features: int, **overrides) -> EncoderConfig:
    try:
        base = dict(MODEL_PRESETS[preset])
    except KeyError:
        raise ConfigError(f"unknown model preset {preset!r}", "preset") from None
    base.update(overrides)
    return EncoderConfig(seq_len=seq_len, in_features=in_features, **base)


def positional_encoding(n: int, d: int) -> np.ndarray:
    """Fixed sinusoidal table: sin on even columns, cos on odd columns."""
    if d % 2:
        raise ConfigError(f"positional encoding needs an even width, got {d}", "d_model")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((n, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def linear_params(rng, fan_in, fan_out, prefix) -> dict:
    return {f"{prefix}.w": _uniform(rng, fan_in, (fan_in, fan_out)),
            f"{prefix}.b": _uniform(rng, fan_in, (fan_out,))}


def linear(x, params, prefix):
    return T.matmul(x, params[f"{prefix}.w"]) + params[f"{prefix}.b"]


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> dict:
    d, dk, dff = config.d_model, config.d_k, config.d_ff
    params = linear_params(rng, config.in_features, d, "embed")
    for i in range(config.n_layers):
        p = f"layer{i}"
        for j in range(config.n_heads):
            for w in ("wq", "wk", "wv"):
                params[f"{p}.head{j}.{w}"] = _uniform(rng, d, (d, dk))
        params[f"{p}.wo"] = _uniform(rng, d, (d, d))
        params.update(linear_params(rng, d, dff, f"{p}.ff1"))
        params.update(linear_params(rng, dff, d, f"{p}.ff2"))
        for ln in ("ln1", "ln2"):
            params[f"{p}.{ln}.gain"] = Tensor(np.ones(d), requires_grad=True)
            params[f"{p}.{ln}.bias"] = Tensor(np.zeros(d), requires_grad=True)
    return params


def param_count(config: EncoderConfig) -> int:
    d, f, dff = config.d_model, config.in_features, config.d_ff
    per_layer = 3 * d * d + d * d + (d * dff + dff) + (dff * d + d) + 4 * d
    return f * d + d + config.n_layers * per_layer


def _heads(x, n_heads):
    # (..., n, h*dk) -> (..., h, n, dk)
    *lead, n, width = x.shape
    x = T.reshape(x, (*lead, n, n_heads, width // n_heads))
    nd = len(lead)
    return T.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))


def multi_head_attention(X, params, prefix, n_heads, return_weights=False):
    """Scaled dot-product self-attention over the token axis (second to last).

    Per head ``softmax(Q K^T / sqrt(d_k)) V`` with ``Q = X W_q`` etc.; the
    heads are concatenated and projected by ``{prefix}.wo``.  Reductions over
    the token axis are evaluated in sorted order so the result is exactly
    equivariant under token permutations.
    """
    X = T.as_tensor(X)
    d = X.shape[-1]
    proj = {}
    for w in ("wq", "wk", "wv"):
        W = T.concat([params[f"{prefix}.head{j}.{w}"] for j in range(n_heads)], axis=1)
        if W.shape[0] != d:
            raise DimensionError(f"attention: input width {d} but {w} expects {W.shape[0]}")
        proj[w] = _heads(T.matmul(X, W), n_heads)
    dk = proj["wq"].shape[-1]
    scores = T.scale(T.matmul(proj["wq"], T.swap_last(proj["wk"]), canonical=True), 1.0 / math.sqrt(dk))
    weights = T.softmax(scores)
    heads = T.matmul(weights, proj["wv"], canonical=True)  # (..., h, n, dv)
    nd = heads.ndim - 3
    merged = T.transpose(heads, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    merged = T.reshape(merged, merged.shape[:-2] + (d,))
    out = T.matmul(merged, params[f"{prefix}.wo"])
    return (out, weights) if return_weights else out


def feed_forward(X, params, prefix):
    return linear(T.relu(linear(X, params, f"{prefix}.ff1")), params, f"{prefix}.ff2")


def encoder_layer(X, params, prefix, n_heads, eps=1e-5):
    """Post-norm layer: ``Y = LN(X + MHA(X))``, ``Z = LN(Y + FF(Y))``."""
    Y = T.layer_norm(X + multi_head_attention(X, params, prefix, n_heads),
                     params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"], eps)
    return T.layer_norm(Y + feed_forward(Y, params, prefix),
                        params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"], eps)


def encoder_forward(X_raw, params, config: EncoderConfig, use_positions=True):
    """Embed ``(..., n, f)`` tokens to width ``d``, add positions, run all layers."""
    X_raw = T.as_tensor(X_raw)
    if X_raw.shape[-1] != config.in_features:
        raise DimensionError(f"encoder: input width {X_raw.shape[-1]} but config expects {config.in_features}")
    X = linear(X_raw, params, "embed")
    if use_positions:
        X = X + positional_encoding(X.shape[-2], config.d_model)
    for i in range(config.n_layers):
        X = encoder_layer(X, params, f"layer{i}", config.n_heads)
    return X


def flop_count(config: EncoderConfig, seq_len: int | None = None) -> dict:
    """Multiply-accumulate counts of one forward pass, from shape algebra.

    ``attention_scores`` is the ``Q K^T`` plus ``A V`` part (quadratic in the
    sequence length); ``attention`` adds the Q/K/V/output projections.
    """
    n = config.seq_len if seq_len is None else seq_len
    d, h, dk, dff = config.d_model, config.n_heads, config.d_k, config.d_ff
    scores = h * n * n * dk + h * n * n * dk
    projections = 3 * n * d * (h * dk) + n * d * d
    ff = n * d * dff + n * dff * d
    layer = {"attention_scores": scores, "attention": projections + scores, "ff": ff}
    embed = n * config.in_features * d
    L = config.n_layers
    return {
        "per_layer": [dict(layer) for _ in range(L)],
        "embed": embed,
        "attention_scores_flops": L * scores,
        "attention_flops": L * (projections + scores),
        "ff_flops": L * ff,
        "total": embed + L * (projections + scores + ff),
    }
