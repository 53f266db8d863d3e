"""Classical and simple learned benchmarks.

* SOMP and regularized least squares for pilot-based channel estimation
* zero-forcing fully-digital precoding and spatially sparse hybrid precoding
* a three-layer MLP feedback autoencoder that plugs into :func:`mtwb.csi.train_csi`

Channels use the same convention as the pipelines: ``H[k]`` is the
``K x N_t`` row for subcarrier ``k`` and measurements are ``Y[k] = A H[k]``.
For precoding, user ``u`` receives ``H_u[k] @ w`` for precoder column ``w``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .channel import ChannelConfig, upa_steering_uv
from .errors import ConfigError, DimensionError, NumericError
from .tensor import Tensor
from .transformer import linear, linear_params


# ---------------------------------------------------------------- dictionaries


@dataclass
class AngularDictionary:
    atoms: np.ndarray  # (N_t, G)
    oversampling: int
    grid: np.ndarray = field(repr=False)  # (G, 2) direction cosines (u, v)

    @property
    def size(self) -> int:
        return self.atoms.shape[1]


def angular_dictionary(config: ChannelConfig, oversampling=2) -> AngularDictionary:
    """UPA steering vectors on a uniform direction-cosine grid over [-1, 1)^2.

    The grid has ``oversampling * N_x`` by ``oversampling * N_y`` points, so
    ``oversampling=1`` reproduces the 2-D DFT basis at half-wavelength spacing.
    """
    if oversampling < 1:
        raise ConfigError(f"must be >= 1, got {oversampling}", "oversampling")
    gx, gy = oversampling * config.n_x, oversampling * config.n_y
    u = -1.0 + 2.0 * np.arange(gx) / gx
    v = -1.0 + 2.0 * np.arange(gy) / gy
    uu, vv = np.meshgrid(u, v, indexing="ij")
    grid = np.stack([uu.ravel(), vv.ravel()], axis=1)
    atoms = upa_steering_uv(grid[:, 0], grid[:, 1], config).T
    return AngularDictionary(np.ascontiguousarray(atoms), oversampling, grid)


# ---------------------------------------------------------------- estimation


@dataclass
class SOMPResult:
    support: list
    coefficients: np.ndarray  # (T, L) for L measurement vectors
    residual_norms: list


def somp(Phi, Y, sparsity) -> SOMPResult:
    """Simultaneous OMP: one shared support for all columns of ``Y``.

    Each step picks the atom of ``Phi`` whose normalized correlations with
    the residual have the largest energy summed over all measurement vectors,
    then refits every column by least squares on the support so far.
    """
    Phi, Y = np.asarray(Phi), np.asarray(Y)
    m = Phi.shape[0]
    if sparsity > m:
        raise ConfigError(f"sparsity {sparsity} exceeds measurement count {m}", "sparsity")
    col_norms = np.linalg.norm(Phi, axis=0)
    col_norms[col_norms == 0] = np.inf
    R = Y.copy()
    support: list[int] = []
    norms = [float(np.linalg.norm(R))]
    coef = np.zeros((0, Y.shape[1]), dtype=np.result_type(Phi, Y))
    for _ in range(sparsity):
        if norms[-1] == 0.0:
            break
        score = (np.abs(Phi.conj().T @ R) ** 2).sum(axis=1) / col_norms ** 2
        score[support] = -np.inf
        support.append(int(np.argmax(score)))
        sub = Phi[:, support]
        if np.linalg.matrix_rank(sub) < len(support):
            raise NumericError(f"somp: rank-deficient support {support}")
        coef, *_ = np.linalg.lstsq(sub, Y, rcond=None)
        R = Y - sub @ coef
        norms.append(float(np.linalg.norm(R)))
    return SOMPResult(support, coef, norms)


def somp_estimate(Y, A, dictionary: AngularDictionary, sparsity) -> np.ndarray:
    """Channel estimate ``K x N_t`` from measurements ``Y`` (``K x M``)."""
    Y, A = np.asarray(Y), np.asarray(A)
    D = dictionary.atoms
    res = somp(A @ D, Y.T, sparsity)
    if not res.support:
        return np.zeros((Y.shape[0], D.shape[0]), dtype=np.complex128)
    return (D[:, res.support] @ res.coefficients).T


def ls_estimate(Y, A, ridge=0.0) -> np.ndarray:
    """Per-subcarrier regularized least squares ``(A^H A + ridge I)^-1 A^H y``."""
    Y, A = np.asarray(Y), np.asarray(A)
    if ridge < 0:
        raise ConfigError(f"must be >= 0, got {ridge}", "ridge")
    n = A.shape[1]
    G = A.conj().T @ A + ridge * np.eye(n)
    if np.linalg.matrix_rank(G) < n:
        raise NumericError("ls_estimate: singular normal equations; use ridge > 0")
    return np.linalg.solve(G, A.conj().T @ Y.T).T


# ---------------------------------------------------------------- precoding


def zero_forcing(Hk) -> np.ndarray:
    """ZF directions for one subcarrier; ``Hk`` is ``U x N_t``, result ``N_t x U``."""
    gram = Hk @ Hk.conj().T
    if np.linalg.matrix_rank(gram) < Hk.shape[0]:
        raise NumericError("zero_forcing: user channels are rank deficient")
    return Hk.conj().T @ np.linalg.inv(gram)


def fully_digital_precoder(channels) -> np.ndarray:
    """Per-subcarrier ZF precoders normalized to ``|W[k]|_F^2 = U``.

    ``channels`` is ``(U, K, N_t)``; the result is ``(K, N_t, U)``.
    """
    channels = np.asarray(channels)
    U, K, _ = channels.shape
    W = np.stack([zero_forcing(channels[:, k, :]) for k in range(K)])
    return W * (np.sqrt(U) / np.linalg.norm(W, axis=(1, 2)))[:, None, None]


def ss_hp(F_opt, dictionary: AngularDictionary, n_rf):
    """Spatially sparse hybrid approximation of per-subcarrier precoders.

    ``F_opt`` is ``(K, N_t, U)``.  Returns ``F_RF`` (``N_t x n_rf``, shared
    across subcarriers, dictionary columns) and ``F_BB`` (``K x n_rf x U``)
    scaled so that ``|F_RF F_BB[k]|_F^2 = U``.
    """
    F_opt = np.asarray(F_opt)
    K, nt, U = F_opt.shape
    D = dictionary.atoms
    if n_rf > D.shape[1]:
        raise ConfigError(f"n_rf {n_rf} exceeds dictionary size {D.shape[1]}", "n_rf")
    target = np.concatenate(list(F_opt), axis=1)  # N_t x K*U
    residual = target
    chosen: list[int] = []
    F_BB = None
    for _ in range(n_rf):
        score = (np.abs(D.conj().T @ residual) ** 2).sum(axis=1)
        score[chosen] = -np.inf
        chosen.append(int(np.argmax(score)))
        F_RF = D[:, chosen]
        if np.linalg.matrix_rank(F_RF) < len(chosen):
            raise NumericError(f"ss_hp: rank-deficient analog selection {chosen}")
        coef, *_ = np.linalg.lstsq(F_RF, target, rcond=None)
        residual = target - F_RF @ coef
        F_BB = coef.reshape(len(chosen), K, U).transpose(1, 0, 2)
    F_RF = D[:, chosen]
    norms = np.linalg.norm(F_RF[None] @ F_BB, axis=(1, 2))
    if np.any(norms == 0):
        raise NumericError("ss_hp: zero hybrid precoder on some subcarrier")
    return F_RF, F_BB * (np.sqrt(U) / norms)[:, None, None]


# ---------------------------------------------------------------- MLP feedback


class MLPFeedback:
    """Three fully-connected layers on each side of the quantizer.

    ``encoder_widths`` and ``decoder_widths`` are the output widths of the
    three layers on each side; the last entries must be ``n_cw`` and
    ``2 K N_t``.  Exposes the same ``encode``/``decode``/``params`` surface
    as :class:`mtwb.csi.TransformerFeedback`.
    """

    name = "MLP"

    def __init__(self, channel: ChannelConfig, n_cw, bits, encoder_widths=None, decoder_widths=None, seed=0):
        self.channel = channel
        self.n_cw = n_cw
        self.bits = bits
        flat = 2 * channel.n_subcarriers * channel.n_antennas
        self.encoder_widths = tuple(encoder_widths or (2 * flat, flat, n_cw))
        self.decoder_widths = tuple(decoder_widths or (flat, 2 * flat, flat))
        if len(self.encoder_widths) != 3 or len(self.decoder_widths) != 3:
            raise ConfigError("need exactly three widths per side", "widths")
        if self.encoder_widths[-1] != n_cw or self.decoder_widths[-1] != flat:
            raise ConfigError(f"last widths must be ({n_cw}, {flat})", "widths")
        rng = np.random.default_rng(seed)
        self.params = {}
        fan = flat
        for i, w in enumerate(self.encoder_widths):
            self.params.update(linear_params(rng, fan, w, f"ue.fc{i}"))
            fan = w
        for i, w in enumerate(self.decoder_widths):
            self.params.update(linear_params(rng, fan, w, f"bs.fc{i}"))
            fan = w

    def param_count(self) -> int:
        return mlp_param_count(2 * self.channel.n_subcarriers * self.channel.n_antennas,
                               self.encoder_widths, self.decoder_widths)

    def flops(self) -> int:
        flat = 2 * self.channel.n_subcarriers * self.channel.n_antennas
        widths = (flat,) + self.encoder_widths + self.decoder_widths
        return sum(a * b for a, b in zip(widths[:-1], widths[1:]))

    def encode(self, H):
        from .csi import channel_tokens

        x = channel_tokens(H)
        x = T.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))
        for i in range(3):
            x = linear(x, self.params, f"ue.fc{i}")
            x = T.relu(x) if i < 2 else T.sigmoid(x)
        return x

    def decode(self, s_hat):
        x = T.as_tensor(s_hat)
        if x.shape[-1] != self.n_cw:
            raise DimensionError(f"decode: codeword length {x.shape[-1]} != {self.n_cw}")
        for i in range(3):
            x = linear(x, self.params, f"bs.fc{i}")
            if i < 2:
                x = T.relu(x)
        K, nt = self.channel.n_subcarriers, self.channel.n_antennas
        return T.reshape(x, x.shape[:-1] + (K, 2 * nt))


def mlp_param_count(in_width, encoder_widths, decoder_widths) -> int:
    widths = (in_width,) + tuple(encoder_widths) + tuple(decoder_widths)
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def mlp_feedback_baseline(channel: ChannelConfig, n_cw, bits, widths=None, seed=0) -> MLPFeedback:
    enc, dec = widths if widths is not None else (None, None)
    return MLPFeedback(channel, n_cw, bits, enc, dec, seed)
