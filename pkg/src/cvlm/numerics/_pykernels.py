"""Reference numpy implementations of the fused row kernels.

Every function takes and returns C-contiguous float64 arrays. Row-wise
kernels operate on 2-D ``(rows, cols)`` views; callers reshape.
"""

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_K = 0.044715


def layer_norm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_bwd(g, xhat, rstd, gamma):
    gxhat = g * gamma
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gxhat - m1 - xhat * m2)
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def gelu_fwd(x):
    """Tanh-approximate GELU; returns ``(y, t)`` with the tanh term for the backward."""
    t = np.tanh(GELU_C * (x + GELU_K * x * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_bwd(g, x, t):
    dt = GELU_C * (1.0 + 3.0 * GELU_K * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


def softmax_fwd(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(g, y):
    return y * (g - (g * y).sum(axis=1, keepdims=True))
