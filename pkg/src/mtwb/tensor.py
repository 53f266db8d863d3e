"""Reverse-mode automatic differentiation on float64 numpy arrays.

Operations are recorded define-by-run onto the innermost active :class:`Tape`
whenever at least one operand requires a gradient.  Outside of a tape every
operation is a plain numpy computation, which is how inference runs.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> backward(tape, loss)[w]
    array([[2., 4.]])

The primitive set is fixed; everything the pipelines need is composed from the
functions in this module.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, TapeError

_TAPES: list["Tape"] = []
_MAC_COUNTERS: list["MacCounter"] = []
_STE_BYPASS = [False]


@dataclass
class _Node:
    parents: tuple
    backward: Callable


class Tape:
    """Ordered record of the primitive operations of one forward pass.

    Nodes are appended as operations execute, so parents always precede their
    children.  A tape supports exactly one :func:`backward` call.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self):
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass")
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        self._release()
        return False

    def _bind(self, leaf):
        owner = leaf._tape
        if owner is not None and owner is not self:
            raise TapeError("tensor is already recorded on another live tape")
        leaf._tape = self
        self._leaves[id(leaf)] = leaf

    def _release(self):
        for leaf in self._leaves.values():
            if leaf._tape is self:
                leaf._tape = None
        self._leaves = {}


class MacCounter:
    """Tally of multiply-accumulates performed by forward matmuls."""

    def __init__(self):
        self.total = 0


@contextmanager
def count_macs():
    counter = MacCounter()
    _MAC_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _MAC_COUNTERS.remove(counter)


@contextmanager
def straight_through_bypass():
    """Make :func:`straight_through` act as the identity in forward passes.

    Used by the finite-difference checker so that the numerical and analytic
    routes see the same (differentiable) function.
    """
    prev = _STE_BYPASS[0]
    _STE_BYPASS[0] = True
    try:
        yield
    finally:
        _STE_BYPASS[0] = prev


class Tensor:
    """An n-dimensional float64 array that may take part in a gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64, order="C")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        # reductions follow memory order, so keep every tensor C-contiguous
        arr = np.asarray(arr, dtype=np.float64, order="C")
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node_id = None
        t._tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor._wrap(self.data)

    def assign(self, value):
        """Rebind the value of a leaf (optimizer updates between tapes)."""
        if self.node_id is not None:
            raise TapeError("cannot assign to a recorded intermediate")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise DimensionError(f"assign shape {value.shape} to tensor of shape {self.data.shape}")
        arr = value.copy()
        arr.flags.writeable = False
        self.data = arr

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return swap_last(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward_fn):
    tape = _TAPES[-1] if _TAPES else None
    out = Tensor._wrap(data)
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    for p in parents:
        if not p.requires_grad:
            continue
        if p.node_id is None:
            tape._bind(p)
        elif p._tape is not tape:
            raise TapeError("operand was recorded on a different tape")
    out.requires_grad = True
    out._tape = tape
    out.node_id = len(tape.nodes)
    tape.nodes.append(_Node(tuple(parents), backward_fn))
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), back)


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float):
    """Multiply by a Python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------- pointwise


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def sin(a):
    a = as_tensor(a)
    x = a.data
    return _make(np.sin(x), (a,), lambda g: (g * np.cos(x),))


def cos(a):
    a = as_tensor(a)
    x = a.data
    return _make(np.cos(x), (a,), lambda g: (-g * np.sin(x),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    # two-branch form keeps exp() from overflowing for large |x|
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def straight_through(a, fn: Callable[[np.ndarray], np.ndarray]):
    """Apply ``fn`` in the forward pass and pass gradients through unchanged."""
    a = as_tensor(a)
    out = a.data if _STE_BYPASS[0] else np.asarray(fn(a.data), dtype=np.float64)
    if out.shape != a.shape:
        raise DimensionError(f"straight_through: fn changed shape {a.shape} -> {out.shape}")
    return _make(out, (a,), lambda g: (g,))


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(out, (a,), back)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def _sorted_sum(x, axis):
    # summing in value order makes the result independent of element order
    x = np.asarray(np.sort(np.moveaxis(x, axis, -1), axis=-1), order="C")
    return x.sum(axis=-1)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b, canonical=False):
    """Batched real matrix product ``a @ b`` over the last two axes.

    Forward products are computed so that each output row depends only on the
    corresponding input row, never on its position in the batch.  With
    ``canonical=True`` the reduction over the inner axis is additionally
    evaluated in sorted order, making the result invariant to any permutation
    of that axis (used for attention over the token axis).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data
    m, k = ad.shape[-2:]
    p = bd.shape[-1]
    if canonical:
        prod = ad[..., :, :, None] * bd[..., None, :, :]
        out = _sorted_sum(prod, axis=-2)
    elif bd.ndim == 2:
        out = (ad[..., None, :] @ bd)[..., 0, :]
    else:
        out = ad @ bd
    macs = int(np.prod(batch, dtype=np.int64)) * m * k * p
    for counter in _MAC_COUNTERS:
        counter.total += macs

    def back(g):
        if bd.ndim == 2:
            # batch axes come from a alone, so flatten them into one gemm
            g2 = g.reshape(-1, p)
            return (g2 @ bd.T).reshape(ad.shape), ad.reshape(-1, k).T @ g2
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), back)


def softmax(a):
    """Softmax over the last axis, computed with max subtraction."""
    a = as_tensor(a)
    x = a.data
    if np.isnan(x).any():
        raise NumericError("softmax: NaN in input")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / _sorted_sum(e, axis=-1)[..., None]

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), back)


softmax_rows = softmax


def layer_norm(x, gain, bias, eps=1e-5):
    """Standardize over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    xd = x.data
    xc = xd - xd.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def back(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), back)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = np.argsort([ax % a.ndim for ax in axes])
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


permute = transpose


def swap_last(a):
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors: Sequence, axis=0):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: no operands")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _make(out, tuple(ts), back)


def stack(tensors: Sequence, axis=0):
    ts = [as_tensor(t) for t in tensors]
    expanded = []
    for t in ts:
        ax = axis % (t.ndim + 1)
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(expanded, axis=axis)


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.shape
    out = a.data[idx]

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (a,), back)


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor) -> dict:
    """Propagate d(loss) back through ``tape``.

    Returns a mapping from every requires-grad leaf reached on the tape to
    its gradient; the same array is stored on ``leaf.grad``.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a backward pass")
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if loss.node_id is None or loss._tape is not tape:
        raise TapeError("loss was not recorded on this tape")
    tape.consumed = True
    node_grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    for nid in range(loss.node_id, -1, -1):
        g = node_grads.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id is not None:
                prev = node_grads.get(parent.node_id)
                node_grads[parent.node_id] = pg if prev is None else prev + pg
            else:
                key = id(parent)
                leaves[key] = parent
                prev = leaf_grads.get(key)
                leaf_grads[key] = np.array(pg) if prev is None else prev + pg
    tape._release()
    result = {}
    for key, leaf in leaves.items():
        leaf.grad = leaf_grads[key]
        result[leaf] = leaf.grad
    return result


def grad_of(tape: Tape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients for ``params`` in order; unreached parameters get zeros."""
    grads = backward(tape, loss)
    return [grads.get(p, np.zeros(p.shape)) for p in params]
