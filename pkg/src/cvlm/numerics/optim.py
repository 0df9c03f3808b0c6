"""AdamW with decoupled weight decay, cosine schedule and norm clipping."""

from __future__ import annotations

import math

import numpy as np

from ..errors import NonFiniteError


def cosine_lr(step, total_steps, warmup_steps, lr_max, lr_min=0.0):
    """Linear warmup from 0 to ``lr_max``, then cosine decay to ``lr_min``.

    ``step`` is clamped to ``[0, total_steps]``.
    """
    step = min(max(step, 0), total_steps)
    if warmup_steps > 0 and step < warmup_steps:
        return lr_max * step / warmup_steps
    span = total_steps - warmup_steps
    progress = (step - warmup_steps) / span if span > 0 else 1.0
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))


def adamw_step(param, grad, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8,
               weight_decay=0.0):
    """One AdamW update on plain arrays.

    ``step`` is the number of updates already applied. Returns
    ``(param, m, v, step + 1)`` as new arrays; inputs are not mutated.
    """
    t = step + 1
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param = param * (1.0 - lr * weight_decay) - lr * mhat / (np.sqrt(vhat) + eps)
    return param, m, v, t


def global_norm(grads):
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


class AdamW:
    """Moment buffers keyed by parameter name, updated in a fixed order."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, lrs):
        """Update ``params`` in place.

        ``grads`` and ``lrs`` map parameter name to gradient array and
        learning rate. Parameters without a gradient are left alone.
        """
        for p in params:
            g = grads.get(p.name)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {p.name!r}")
            m = self.m.get(p.name)
            if m is None:
                m = np.zeros(p.shape)
                self.v[p.name] = np.zeros(p.shape)
            p.data, self.m[p.name], self.v[p.name], _ = adamw_step(
                p.data, g, m, self.v[p.name], self.step_count, lrs[p.name],
                self.beta1, self.beta2, self.eps, self.weight_decay)
        self.step_count += 1


def clip_by_global_norm(grads, max_norm):
    """Scale ``{name: grad}`` so the global norm is at most ``max_norm``.

    Returns the clipped dict and the pre-clip norm.
    """
    norm = global_norm(grads.values())
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm
