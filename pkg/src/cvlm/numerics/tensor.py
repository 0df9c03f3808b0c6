"""Reverse-mode automatic differentiation over float64 numpy arrays.

Operations are recorded only while a :class:`Tape` is active and only when
at least one input requires a gradient, so inference code pays nothing for
the graph. A tape is single-use: ``backward`` consumes it.

    with Tape() as tape:
        loss = model.loss(batch)
    grads = tape.backward(loss)   # {leaf tensor: ndarray}

Only leaves that require a gradient appear in the result, so frozen
parameters never receive one.
"""

from __future__ import annotations

import threading

import numpy as np

from ..errors import ShapeError
from . import kernels

MASK_VALUE = -1e9

_local = threading.local()


class StaleTapeError(RuntimeError):
    pass


def current_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """An n-d float64 array plus an autodiff flag.

    ``data`` is a C-ordered ndarray, so ``data.ravel()`` is the row-major
    buffer and ``data.shape`` the dimension list.
    """

    __slots__ = ("data", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


class Parameter(Tensor):
    """A named leaf tensor owned by a model.

    ``group`` selects the learning rate and freeze status per training stage.
    ``init`` and ``std`` describe how :meth:`Module.init_parameters` fills it.
    """

    __slots__ = ("name", "group", "init", "std")

    def __init__(self, shape, group, init="normal", std=0.02, name=""):
        fill = {"normal": 0.0, "zeros": 0.0, "ones": 1.0}[init]
        super().__init__(np.full(shape, fill), requires_grad=True)
        self.name = name
        self.group = group
        self.init = init
        self.std = std

    @property
    def trainable(self):
        return self.requires_grad

    @trainable.setter
    def trainable(self, value):
        self.requires_grad = bool(value)

    def __repr__(self):
        return (f"Parameter({self.name!r}, shape={self.shape}, group={self.group!r}, "
                f"trainable={self.trainable})")


class Tape:
    """Ordered record of differentiable operations.

    Records are appended in execution order, so the reversed list is a
    reverse topological order and each node is visited exactly once.
    """

    def __init__(self):
        self.records = []
        self.consumed = False

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def parameters(self):
        """Parameters that appear as inputs anywhere on the tape."""
        seen = {}
        for _, parents, _ in self.records:
            for p in parents:
                if isinstance(p, Parameter):
                    seen[id(p)] = p
        return list(seen.values())

    def backward(self, loss):
        if self.consumed:
            raise StaleTapeError("tape already consumed by backward(); run a new forward pass")
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        produced = {id(out) for out, _, _ in self.records}
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for out, parents, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key not in produced:
                    leaves[key] = p
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
        self.records = []
        return {p: grads[k] for k, p in leaves.items()}


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    tape = current_tape()
    if tape is not None and not tape.consumed:
        for p in parents:
            if p.requires_grad:
                out = Tensor(data, requires_grad=True)
                tape.records.append((out, parents, backward))
                return out
    return Tensor(data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    a = _as_tensor(a)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def sum_all(a):
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def sum_axis(a, axis):
    shape = a.shape

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _result(a.data.sum(axis=axis), (a,), back)


def mean_all(a):
    shape, n = a.shape, a.data.size
    return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape),))


# -------------------------------------------------------------- structural

def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, i, j):
    return _result(a.data.swapaxes(i, j), (a,), lambda g: (g.swapaxes(i, j),))


def getitem(a, index):
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _result(a.data[index], (a,), back)


def concat(tensors, axis=0):
    tensors = [t for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def broadcast_rows(a, batch):
    """Tile a ``[n, d]`` tensor to ``[batch, n, d]``."""
    return _result(np.broadcast_to(a.data, (batch,) + a.shape), (a,),
                   lambda g: (g.sum(axis=0),))


def embedding(ids, table):
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]

    def back(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeError(f"token id out of range for table of {vocab} rows")
    return _result(table.data[ids], (table,), back)


# ------------------------------------------------------------------ linear

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape),
                _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape))

    return _result(ad @ bd, (a, b), back)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: x {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (wd.shape[0],))

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, back)


# ---------------------------------------------------------- fused kernels

def layer_norm(x, gamma, beta, eps=1e-5):
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm shape mismatch: x {x.shape}, gamma {gamma.shape}, "
                         f"beta {beta.shape}")
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y, xhat, rstd = kernels.layer_norm_fwd(x2, gamma.data, beta.data, eps)
    shape = x.shape

    def back(g):
        gx, gg, gb = kernels.layer_norm_bwd(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd,
                                            gamma.data)
        return gx.reshape(shape), gg, gb

    return _result(y.reshape(shape), (x, gamma, beta), back)


def gelu(x):
    xd = x.data
    y, t = kernels.gelu_fwd(xd)
    return _result(y, (x,), lambda g: (kernels.gelu_bwd(g, xd, t),))


def softmax(x, mask=None):
    """Softmax over the last axis; ``mask`` is an additive constant array."""
    d = x.shape[-1]
    z = x.data if mask is None else x.data + mask
    shape = z.shape
    y = kernels.softmax_fwd(np.ascontiguousarray(z.reshape(-1, d)))

    def back(g):
        g2 = np.ascontiguousarray(np.broadcast_to(g, shape).reshape(-1, d))
        gx = kernels.softmax_bwd(g2, y).reshape(shape)
        return (_unbroadcast(gx, x.shape),)

    return _result(y.reshape(shape), (x,), back)


def cross_entropy(logits, targets, weights, reduction="mean"):
    """Next-token cross-entropy.

    ``logits`` is ``[..., V]``; ``targets`` integer ids and ``weights`` a
    0/1 (or boolean) array, both of shape ``logits.shape[:-1]``. Masked
    positions contribute nothing. ``reduction`` is ``"mean"`` over unmasked
    positions or ``"sum"``.
    """
    V = logits.shape[-1]
    z = logits.data.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if t.shape[0] != z.shape[0] or w.shape[0] != z.shape[0]:
        raise ShapeError(f"targets {np.shape(targets)} do not match logits {logits.shape}")
    count = w.sum()
    if count <= 0:
        raise ValueError("degenerate batch: every target position is masked")
    live = w > 0
    if np.any(t[live] < 0) or np.any(t[live] >= V):
        raise ShapeError(f"target id outside vocabulary of size {V}")
    t = np.where(live, t, 0)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    logp = z[np.arange(z.shape[0]), t] - (m[:, 0] + np.log(s[:, 0]))
    scale = 1.0 / count if reduction == "mean" else 1.0
    loss = -(w * logp).sum() * scale
    shape = logits.shape

    def back(g):
        p = e / s
        p[np.arange(z.shape[0]), t] -= 1.0
        return ((p * (w * scale * g)[:, None]).reshape(shape),)

    return _result(np.asarray(loss), (logits,), back)
