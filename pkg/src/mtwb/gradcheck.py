"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, backward, straight_through_bypass


def _pack(point, leaves):
    if isinstance(point, dict):
        return dict(zip(point.keys(), leaves))
    if isinstance(point, (list, tuple)):
        return list(leaves)
    return leaves[0]


def _call(fn, packed):
    if isinstance(packed, dict):
        return fn(packed)
    if isinstance(packed, list):
        return fn(*packed)
    return fn(packed)


def finite_diff_check(fn, point, step=1e-5, floor=1e-6):
    """Worst per-coordinate relative error between tape and numerical gradients.

    ``point`` is an array, a list of arrays (passed positionally to ``fn``) or
    a dict of arrays (passed as one dict).  ``fn`` must return a scalar
    Tensor.  The error at a coordinate is ``|g - n| / max(|g|, |n|, floor)``;
    ``floor`` keeps coordinates with vanishing gradient from dominating.

    Straight-through quantizers are evaluated as the identity on both routes,
    since their forward map is piecewise constant and has no useful
    numerical derivative.
    """
    arrays = list(point.values()) if isinstance(point, dict) else (
        list(point) if isinstance(point, (list, tuple)) else [point])
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with straight_through_bypass():
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            loss = _call(fn, _pack(point, leaves))
        grads = backward(tape, loss)
        analytic = [grads.get(leaf, np.zeros(leaf.shape)) for leaf in leaves]

        def evaluate(values):
            return _call(fn, _pack(point, [Tensor(v) for v in values])).item()

        worst = 0.0
        for i, base in enumerate(arrays):
            flat = base.reshape(-1)
            for j in range(flat.size):
                plus, minus = flat.copy(), flat.copy()
                plus[j] += step
                minus[j] -= step
                vp = evaluate(arrays[:i] + [plus.reshape(base.shape)] + arrays[i + 1:])
                vm = evaluate(arrays[:i] + [minus.reshape(base.shape)] + arrays[i + 1:])
                num = (vp - vm) / (2.0 * step)
                ana = analytic[i].reshape(-1)[j]
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    return worst
