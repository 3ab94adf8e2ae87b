# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row kernels for the attention / normalization hot path.

Mirrors :mod:`mmrobust._kernels_py` one-to-one. Inputs are 2-D C-contiguous
float64 arrays ``(rows, n)``; masks are uint8 of the same shape.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, erf, INFINITY

cnp.import_array()

BACKEND = "cython"

cdef double INV_SQRT2 = 0.70710678118654752440
cdef double INV_SQRT2PI = 0.39894228040143267794


def masked_softmax_fwd(const double[:, ::1] x, const unsigned char[:, ::1] mask):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    cdef double mx, total, v
    out_arr = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(rows):
        mx = -INFINITY
        for j in range(n):
            if mask[i, j] and x[i, j] > mx:
                mx = x[i, j]
        if mx == -INFINITY:
            # either fully masked or every unmasked logit is -inf
            for j in range(n):
                if mask[i, j]:
                    break
            else:
                return None, i
        total = 0.0
        for j in range(n):
            if mask[i, j]:
                v = exp(x[i, j] - mx)
                out[i, j] = v
                total += v
            else:
                out[i, j] = 0.0
        for j in range(n):
            out[i, j] = out[i, j] / total
    return out_arr, -1


def masked_softmax_bwd(const double[:, ::1] p, const double[:, ::1] gout):
    cdef Py_ssize_t rows = p.shape[0], n = p.shape[1], i, j
    cdef double dot
    res = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] g = res
    for i in range(rows):
        dot = 0.0
        for j in range(n):
            dot += p[i, j] * gout[i, j]
        for j in range(n):
            g[i, j] = p[i, j] * (gout[i, j] - dot)
    return res


def layernorm_fwd(const double[:, ::1] x, const double[::1] gain,
                  const double[::1] bias, double eps):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    cdef double mu, var, r, d
    y_arr = np.empty((rows, n), dtype=np.float64)
    xhat_arr = np.empty((rows, n), dtype=np.float64)
    rstd_arr = np.empty(rows, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    for i in range(rows):
        mu = 0.0
        for j in range(n):
            mu += x[i, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mu
            var += d * d
        var /= n
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(n):
            d = (x[i, j] - mu) * r
            xhat[i, j] = d
            y[i, j] = d * gain[j] + bias[j]
    return y_arr, xhat_arr, rstd_arr


def layernorm_bwd(const double[:, ::1] gout, const double[:, ::1] xhat,
                  const double[::1] rstd, const double[::1] gain):
    cdef Py_ssize_t rows = gout.shape[0], n = gout.shape[1], i, j
    cdef double m1, m2, gh
    gx_arr = np.empty((rows, n), dtype=np.float64)
    ggain_arr = np.zeros(n, dtype=np.float64)
    gbias_arr = np.zeros(n, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] ggain = ggain_arr
    cdef double[::1] gbias = gbias_arr
    for i in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(n):
            gh = gout[i, j] * gain[j]
            m1 += gh
            m2 += gh * xhat[i, j]
            ggain[j] += gout[i, j] * xhat[i, j]
            gbias[j] += gout[i, j]
        m1 /= n
        m2 /= n
        for j in range(n):
            gx[i, j] = (gout[i, j] * gain[j] - m1 - xhat[i, j] * m2) * rstd[i]
    return gx_arr, ggain_arr, gbias_arr


def gelu_fwd(const double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    cdef double v
    res = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] y = res
    for i in range(rows):
        for j in range(n):
            v = x[i, j]
            y[i, j] = 0.5 * v * (1.0 + erf(v * INV_SQRT2))
    return res


def gelu_bwd(const double[:, ::1] x, const double[:, ::1] gout):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    cdef double v
    res = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] g = res
    for i in range(rows):
        for j in range(n):
            v = x[i, j]
            g[i, j] = gout[i, j] * (0.5 * (1.0 + erf(v * INV_SQRT2))
                                    + v * INV_SQRT2PI * exp(-0.5 * v * v))
    return res
