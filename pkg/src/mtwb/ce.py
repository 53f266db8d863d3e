"""Joint pilot design and channel estimation.

A trainable complex pilot matrix ``A`` (``M x N_t``, unit-norm rows) maps each
subcarrier's channel to ``M`` noisy measurements; a transformer encoder whose
tokens are the ``K`` subcarriers reconstructs the full channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cplx
from . import tensor as T
from .channel import ChannelConfig, awgn, nmse_db
from .errors import DimensionError
from .tensor import Tensor
from .training import TrainConfig, TrainResult, fit
from .transformer import EncoderConfig, encoder_forward, flop_count, init_encoder, linear, linear_params, preset_config

TRAIN_SNRS_DB = (0.0, 5.0, 10.0, 15.0, 20.0)
VAL_SNR_DB = 10.0


def pilot_count(config: ChannelConfig, ratio: float) -> int:
    return max(1, int(round(ratio * config.n_antennas)))


@dataclass
class CEModel:
    channel: ChannelConfig
    n_pilots: int
    encoder: EncoderConfig
    params: dict

    @property
    def pilots(self) -> np.ndarray:
        return self.params["pilot.re"].data + 1j * self.params["pilot.im"].data

    def scoped(self, prefix):
        n = len(prefix)
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix)}

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


def init_ce(channel: ChannelConfig, preset="S", pilot_ratio=3 / 8, seed=0, **encoder_overrides) -> CEModel:
    rng = np.random.default_rng(seed)
    m = pilot_count(channel, pilot_ratio)
    enc = preset_config(preset, channel.n_subcarriers, 2 * m, **encoder_overrides)
    A = rng.standard_normal((m, channel.n_antennas)) + 1j * rng.standard_normal((m, channel.n_antennas))
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    params = {"pilot.re": Tensor(A.real, requires_grad=True), "pilot.im": Tensor(A.imag, requires_grad=True)}
    params.update({f"est.{k}": v for k, v in init_encoder(enc, rng).items()})
    params.update(linear_params(rng, enc.d_model, 2 * channel.n_antennas, "head"))
    return CEModel(channel, m, enc, params)


def normalize_pilots(model: CEModel) -> None:
    """Project every pilot row back to unit norm."""
    A = model.pilots
    A = A / np.linalg.norm(A, axis=1, keepdims=True)
    model.params["pilot.re"].assign(A.real)
    model.params["pilot.im"].assign(A.imag)


def pilot_project(H, pilot_re, pilot_im, snr_db, rng):
    """Measurements ``Y[k] = A H[k] + n`` as a (real, imag) Tensor pair.

    ``H`` is complex ``(..., K, N_t)``.  The noise is drawn from the current
    noiseless measurement power and enters the tape as a constant.
    """
    H = np.asarray(H)
    pilot_re, pilot_im = T.as_tensor(pilot_re), T.as_tensor(pilot_im)
    if H.shape[-1] != pilot_re.shape[-1]:
        raise DimensionError(f"pilot_project: channel {H.shape} vs pilots {pilot_re.shape}")
    Y = cplx.cmatmul(cplx.split(H), (T.swap_last(pilot_re), T.swap_last(pilot_im)))
    clean = cplx.combine(Y)
    batched = clean.ndim > 2
    noise = awgn(clean, snr_db, rng, batched=batched) - clean
    if not np.any(noise):
        return Y
    return Y[0] + noise.real, Y[1] + noise.imag


def estimate(Y, model: CEModel):
    """Reconstruct ``H_hat`` (real, imag pair, ``(..., K, N_t)``) from measurements."""
    tokens = cplx.to_tokens(Y)
    if tokens.shape[-1] != model.encoder.in_features or tokens.shape[-2] != model.channel.n_subcarriers:
        raise DimensionError(f"estimate: measurement tokens {tokens.shape} do not match the model")
    feats = encoder_forward(tokens, model.scoped("est."), model.encoder, use_positions=True)
    return cplx.from_tokens(linear(feats, model.params, "head"))


def predict(H, model: CEModel, snr_db, rng) -> np.ndarray:
    """Complex channel estimate for noiseless channels ``H`` observed at ``snr_db``."""
    Y = pilot_project(H, model.params["pilot.re"], model.params["pilot.im"], snr_db, rng)
    return cplx.combine(estimate(Y, model))


def ce_loss(H, model: CEModel, snr_db, rng):
    """Mean squared error per complex entry (unnormalized)."""
    Y = pilot_project(H, model.params["pilot.re"], model.params["pilot.im"], snr_db, rng)
    Hr, Hi = estimate(Y, model)
    err = cplx.abs2((Hr - H.real, Hi - H.imag))
    return err.mean()


def evaluate_ce(model: CEModel, H, snr_db, seed=0, batch_size=256) -> float:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    est = np.concatenate([predict(H[i:i + batch_size], model, snr_db, rng) for i in range(0, len(H), batch_size)])
    return nmse_db(est, H)


def train_ce(train_H, val_H, model: CEModel, hyper: TrainConfig, train_snrs=TRAIN_SNRS_DB,
             val_snr=VAL_SNR_DB) -> TrainResult:
    """Train pilots and estimator end to end; ``model`` ends at its best validation epoch.

    Each mini-batch draws its training SNR uniformly from ``train_snrs``.
    """
    train_H = np.asarray(train_H)

    def loss_fn(idx, rng):
        snr = train_snrs[rng.integers(len(train_snrs))]
        return ce_loss(train_H[idx], model, snr, rng)

    trainable = {k: v for k, v in model.params.items()}
    return fit(trainable, loss_fn, len(train_H), lambda: evaluate_ce(model, val_H, val_snr), hyper,
               post_step=lambda: normalize_pilots(model))


def ce_flops(model: CEModel) -> int:
    """Forward multiply-accumulates per channel sample."""
    K, m, nt = model.channel.n_subcarriers, model.n_pilots, model.channel.n_antennas
    return 4 * K * nt * m + flop_count(model.encoder)["total"] + K * model.encoder.d_model * 2 * nt
