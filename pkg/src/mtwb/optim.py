"""Adam optimizer, as a pure step function and a small stateful wrapper."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update.

    Returns ``(new_params, new_state)``; inputs are left untouched.  Moment
    buffers are created lazily on the first step.
    """
    if len(params) != len(grads):
        raise DimensionError(f"adam_step: {len(params)} params but {len(grads)} grads")
    m = state.m or [np.zeros_like(p) for p in params]
    v = state.v or [np.zeros_like(p) for p in params]
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        if np.shape(p) != np.shape(g) or np.shape(mi) != np.shape(p):
            raise DimensionError(f"adam_step: param {np.shape(p)} vs grad {np.shape(g)}")
        mi = b1 * mi + (1.0 - b1) * g
        vi = b2 * vi + (1.0 - b2) * g * g
        new_p.append(p - state.lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps))
        new_m.append(mi)
        new_v.append(vi)
    new_state = AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)
    return new_p, new_state


class Adam:
    """Adam bound to a list of leaf tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, eps)

    def step(self, grads):
        values, self.state = adam_step([p.data for p in self.params], grads, self.state)
        for p, value in zip(self.params, values):
            p.assign(value)
