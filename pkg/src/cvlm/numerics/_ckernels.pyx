# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused single-pass row kernels.

Same contracts as ``_pykernels``; each kernel walks a row once or twice
instead of materialising numpy temporaries.
"""

import numpy as np

from libc.math cimport exp, sqrt, tanh

cdef double GELU_C = 0.7978845608028654
cdef double GELU_K = 0.044715


def layer_norm_fwd(const double[:, ::1] x, const double[::1] gamma,
                   const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    y_arr = np.empty((n, d))
    xhat_arr = np.empty((n, d))
    rstd_arr = np.empty(n)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mu, var, r, c
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var += c * c
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                c = (x[i, j] - mu) * r
                xhat[i, j] = c
                y[i, j] = c * gamma[j] + beta[j]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_bwd(const double[:, ::1] g, const double[:, ::1] xhat,
                   const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    gx_arr = np.empty((n, d))
    gg_arr = np.zeros(d)
    gb_arr = np.zeros(d)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    cdef double m1, m2, t
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                t = g[i, j] * gamma[j]
                m1 += t
                m2 += t * xhat[i, j]
                gg[j] += g[i, j] * xhat[i, j]
                gb[j] += g[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                gx[i, j] = rstd[i] * (g[i, j] * gamma[j] - m1 - xhat[i, j] * m2)
    return gx_arr, gg_arr, gb_arr


def gelu_fwd(x):
    """Returns ``(y, t)``; ``t`` is the saved tanh term reused by the backward."""
    src = np.ascontiguousarray(x).reshape(-1)
    out = np.empty_like(src)
    th = np.empty_like(src)
    cdef const double[::1] a = src
    cdef double[::1] y = out
    cdef double[::1] t = th
    cdef Py_ssize_t i, n = a.shape[0]
    cdef double v, u
    with nogil:
        for i in range(n):
            v = a[i]
            u = 1.0 - 2.0 / (exp(2.0 * GELU_C * (v + GELU_K * v * v * v)) + 1.0)
            t[i] = u
            y[i] = 0.5 * v * (1.0 + u)
    return out.reshape(np.shape(x)), th.reshape(np.shape(x))


def gelu_bwd(g, x, t):
    gsrc = np.ascontiguousarray(g).reshape(-1)
    xsrc = np.ascontiguousarray(x).reshape(-1)
    tsrc = np.ascontiguousarray(t).reshape(-1)
    out = np.empty_like(xsrc)
    cdef const double[::1] gg = gsrc
    cdef const double[::1] a = xsrc
    cdef const double[::1] th = tsrc
    cdef double[::1] y = out
    cdef Py_ssize_t i, n = a.shape[0]
    cdef double v, u
    with nogil:
        for i in range(n):
            v = a[i]
            u = th[i]
            y[i] = gg[i] * (0.5 * (1.0 + u)
                            + 0.5 * v * (1.0 - u * u) * GELU_C * (1.0 + 3.0 * GELU_K * v * v))
    return out.reshape(np.shape(x))


def softmax_fwd(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out = np.empty((n, d))
    cdef double[:, ::1] y = out
    cdef double m, s, e
    with nogil:
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                e = exp(x[i, j] - m)
                y[i, j] = e
                s += e
            s = 1.0 / s
            for j in range(d):
                y[i, j] *= s
    return out


def softmax_bwd(const double[:, ::1] g, const double[:, ::1] y):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    out = np.empty((n, d))
    cdef double[:, ::1] gx = out
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += g[i, j] * y[i, j]
            for j in range(d):
                gx[i, j] = y[i, j] * (g[i, j] - dot)
    return out
