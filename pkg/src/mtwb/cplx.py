"""Complex arithmetic on (real, imag) pairs of Tensors."""

from __future__ import annotations

import numpy as np

from . import tensor as T


def split(z):
    z = np.asarray(z)
    return T.Tensor._wrap(z.real), T.Tensor._wrap(z.imag)


def combine(pair) -> np.ndarray:
    re, im = pair
    return T.as_tensor(re).data + 1j * T.as_tensor(im).data


def cmatmul(a, b):
    ar, ai = a
    br, bi = b
    return T.matmul(ar, br) - T.matmul(ai, bi), T.matmul(ar, bi) + T.matmul(ai, br)


def cmul(a, b):
    ar, ai = a
    br, bi = b
    return ar * br - ai * bi, ar * bi + ai * br


def abs2(a):
    re, im = a
    return re * re + im * im


def to_tokens(pair):
    """``(..., n)`` complex pair to real ``(..., 2n)``, real parts first."""
    return T.concat(list(pair), axis=-1)


def from_tokens(x):
    n = x.shape[-1] // 2
    return x[..., :n], x[..., n:]
