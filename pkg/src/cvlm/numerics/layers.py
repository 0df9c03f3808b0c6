"""Neural layers composed from the autodiff ops.

Parameters are created unnamed with an init recipe; the owning model calls
:meth:`Module.assign_names` and :meth:`Module.init_parameters`. Each
parameter draws from its own RNG stream keyed by ``(seed, crc32(name))``, so
adding or removing a sibling module never changes another module's weights.
"""

from __future__ import annotations

import math
import zlib

import numpy as np

from ..errors import ConfigError, ShapeError
from .tensor import (
    MASK_VALUE,
    Parameter,
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    linear,
    matmul,
    mul,
    reshape,
    softmax,
    swapaxes,
)


class Module:
    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix=""):
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def init_parameters(self, seed):
        for p in self.parameters():
            if p.init == "normal":
                rng = np.random.default_rng([seed, zlib.crc32(p.name.encode())])
                p.data = rng.normal(0.0, p.std, p.shape)
            elif p.init == "zeros":
                p.data = np.zeros(p.shape)
            else:
                p.data = np.ones(p.shape)
        return self

    def state_dict(self):
        return {p.name: p.data for p in self.parameters()}


def causal_mask(n):
    """``[n, n]`` additive mask: 0 on and below the diagonal, -1e9 above."""
    return np.triu(np.full((n, n), MASK_VALUE), k=1)


def _batched(x):
    """Promote a 2-D ``[L, d]`` tensor to ``[1, L, d]``; report if it was."""
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"expected [L, d] or [B, L, d], got {x.shape}")
    return x, False


def attention(q, k, v, mask=None):
    """softmax(q kᵀ / √d + mask) v over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query {q.shape} and key {k.shape} feature dims differ")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: key {k.shape} and value {v.shape} lengths differ")
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores, mask), v)


class Linear(Module):
    def __init__(self, d_in, d_out, group, bias=True, zero_init=False, std=0.02):
        self.weight = Parameter((d_out, d_in), group, init="zeros" if zero_init else "normal",
                                std=std)
        self.bias = Parameter((d_out,), group, init="zeros") if bias else None

    def effective_weight(self):
        return self.weight

    def __call__(self, x):
        return linear(x, self.effective_weight(), self.bias)


def lora_apply(base_weight, lora_a, lora_b, scale):
    """Effective weight ``W + scale · B A`` as a differentiable tensor."""
    if lora_b.shape[1] != lora_a.shape[0] or lora_b.shape[0] != base_weight.shape[0] \
            or lora_a.shape[1] != base_weight.shape[1]:
        raise ConfigError(f"LoRA shapes A {lora_a.shape}, B {lora_b.shape} do not fit "
                          f"weight {base_weight.shape}")
    return add(base_weight, mul(matmul(lora_b, lora_a), scale))


def lora_merge(base_weight, lora_a, lora_b, scale):
    """Plain-array merge used for export; same arithmetic as :func:`lora_apply`."""
    return base_weight + (lora_b @ lora_a) * scale


class LoRALinear(Linear):
    """Linear layer whose weight is adapted as ``W + (alpha / r) · B A``.

    ``B`` starts at zero, so the adapted layer equals the base layer at
    initialization.
    """

    def __init__(self, d_in, d_out, group, rank, alpha, lora_group="lora", bias=True):
        super().__init__(d_in, d_out, group, bias=bias)
        if rank < 1 or rank > min(d_in, d_out):
            raise ConfigError(f"LoRA rank {rank} must lie in [1, {min(d_in, d_out)}]")
        self.rank = rank
        self.alpha = alpha
        self.lora_A = Parameter((rank, d_in), lora_group)
        self.lora_B = Parameter((d_out, rank), lora_group, init="zeros")

    @property
    def scale(self):
        return self.alpha / self.rank

    def effective_weight(self):
        return lora_apply(self.weight, self.lora_A, self.lora_B, self.scale)

    def merged_weight(self):
        return lora_merge(self.weight.data, self.lora_A.data, self.lora_B.data, self.scale)


class LayerNorm(Module):
    def __init__(self, d, group, eps=1e-5):
        self.gamma = Parameter((d,), group, init="ones")
        self.beta = Parameter((d,), group, init="zeros")
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    def __init__(self, d, hidden, group):
        self.fc1 = Linear(d, hidden, group)
        self.fc2 = Linear(hidden, d, group)

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Multi-head attention with separate q/k/v/o projections.

    Self-attention when ``kv`` is omitted, cross-attention otherwise; ``d_kv``
    is the feature size of the key/value source. ``lora=(rank, alpha)``
    adapts the query and value projections.
    """

    def __init__(self, d_model, n_heads, group, d_kv=None, zero_out=False, lora=None):
        if n_heads < 1 or d_model % n_heads:
            raise ConfigError(f"model dim {d_model} is not divisible by {n_heads} heads")
        d_kv = d_model if d_kv is None else d_kv
        self.n_heads = n_heads
        if lora is None:
            self.q = Linear(d_model, d_model, group)
            self.v = Linear(d_kv, d_model, group)
        else:
            self.q = LoRALinear(d_model, d_model, group, *lora)
            self.v = LoRALinear(d_kv, d_model, group, *lora)
        self.k = Linear(d_kv, d_model, group)
        self.o = Linear(d_model, d_model, group, zero_init=zero_out)

    def _split(self, x):
        B, L, d = x.shape
        return swapaxes(reshape(x, (B, L, self.n_heads, d // self.n_heads)), 1, 2)

    def __call__(self, x, kv=None, mask=None):
        x, squeeze = _batched(x)
        src = x if kv is None else _batched(kv)[0]
        if src.shape[0] != x.shape[0]:
            raise ShapeError(f"query batch {x.shape} and key/value batch {src.shape} differ")
        q, k, v = self._split(self.q(x)), self._split(self.k(src)), self._split(self.v(src))
        heads = attention(q, k, v, mask)
        B, H, L, dh = heads.shape
        out = self.o(reshape(swapaxes(heads, 1, 2), (B, L, H * dh)))
        return reshape(out, out.shape[1:]) if squeeze else out


def multi_head_attention(x, kv, heads, mask, weights):
    """Functional form of :class:`MultiHeadAttention`.

    ``weights`` maps ``q, k, v, o`` to ``(W, b)`` tensor pairs; ``kv=None``
    means self-attention.
    """
    d = weights["q"][0].shape[0]
    if heads < 1 or d % heads:
        raise ConfigError(f"model dim {d} is not divisible by {heads} heads")
    x, squeeze = _batched(x)
    src = x if kv is None else _batched(kv)[0]

    def split(t):
        B, L, _ = t.shape
        return swapaxes(reshape(t, (B, L, heads, d // heads)), 1, 2)

    q = split(linear(x, *weights["q"]))
    k = split(linear(src, *weights["k"]))
    v = split(linear(src, *weights["v"]))
    h = attention(q, k, v, mask)
    B, H, L, dh = h.shape
    out = linear(reshape(swapaxes(h, 1, 2), (B, L, H * dh)), *weights["o"])
    return reshape(out, out.shape[1:]) if squeeze else out


def sinusoidal_positions(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


__all__ = [
    "Module", "Linear", "LoRALinear", "LayerNorm", "FeedForward", "MultiHeadAttention",
    "attention", "multi_head_attention", "causal_mask", "lora_apply", "lora_merge",
    "sinusoidal_positions", "Tensor", "concat",
]
