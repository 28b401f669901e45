# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Fused float64 kernels for the row-wise hot ops (softmax, layer norm, GELU).

Single pass per row where possible; inputs are 2D C-contiguous with the
reduced axis last (or flat 1D for the elementwise GELU). Semantics match
``kernels_py`` apart from summation order (sequential here, pairwise in
numpy), so results agree to rounding, not bitwise.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def softmax_fw(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double m, s
    out_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            out[i, j] = exp(x[i, j] - m)
            s += out[i, j]
        for j in range(d):
            out[i, j] /= s
    return out_arr


def softmax_bw(double[:, ::1] y, double[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    cdef double inner
    gx_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    for i in range(n):
        inner = 0.0
        for j in range(d):
            inner += gy[i, j] * y[i, j]
        for j in range(d):
            gx[i, j] = y[i, j] * (gy[i, j] - inner)
    return gx_arr


def log_softmax_fw(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double m, s
    out_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            out[i, j] = x[i, j] - m
            s += exp(out[i, j])
        s = log(s)
        for j in range(d):
            out[i, j] -= s
    return out_arr


def log_softmax_bw(double[:, ::1] logp, double[:, ::1] gy):
    cdef Py_ssize_t n = logp.shape[0], d = logp.shape[1], i, j
    cdef double s
    gx_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += gy[i, j]
        for j in range(d):
            gx[i, j] = gy[i, j] - exp(logp[i, j]) * s
    return gx_arr


def gelu_fw(double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double u
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n):
        u = GELU_C * (x[i] + GELU_A * x[i] * x[i] * x[i])
        out[i] = 0.5 * x[i] * (1.0 + tanh(u))
    return out_arr


def gelu_bw(double[::1] x, double[::1] gy):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double x2, u, t, du
    gx_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] gx = gx_arr
    for i in range(n):
        x2 = x[i] * x[i]
        u = GELU_C * (x[i] + GELU_A * x[i] * x2)
        t = tanh(u)
        du = GELU_C * (1.0 + 3.0 * GELU_A * x2)
        gx[i] = gy[i] * (0.5 * (1.0 + t) + 0.5 * x[i] * (1.0 - t * t) * du)
    return gx_arr


def layer_norm_fw(double[:, ::1] x, double[::1] gamma, double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double mu, var, rs, xc
    y_arr = np.empty((n, d), dtype=np.float64)
    xhat_arr = np.empty((n, d), dtype=np.float64)
    rstd_arr = np.empty((n, 1), dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[:, ::1] rstd = rstd_arr
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            xc = x[i, j] - mu
            var += xc * xc
        var /= d
        rs = 1.0 / sqrt(var + eps)
        rstd[i, 0] = rs
        for j in range(d):
            xhat[i, j] = (x[i, j] - mu) * rs
            y[i, j] = xhat[i, j] * gamma[j] + beta[j]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_bw(double[:, ::1] xhat, double[:, ::1] rstd,
                  double[::1] gamma, double[:, ::1] gy):
    cdef Py_ssize_t n = xhat.shape[0], d = xhat.shape[1], i, j
    cdef double m1, m2, gxh
    gx_arr = np.empty((n, d), dtype=np.float64)
    ggamma_arr = np.zeros(d, dtype=np.float64)
    gbeta_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] ggamma = ggamma_arr
    cdef double[::1] gbeta = gbeta_arr
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            gxh = gy[i, j] * gamma[j]
            m1 += gxh
            m2 += gxh * xhat[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            gxh = gy[i, j] * gamma[j]
            gx[i, j] = rstd[i, 0] * (gxh - m1 - xhat[i, j] * m2)
            ggamma[j] += gy[i, j] * xhat[i, j]
            gbeta[j] += gy[i, j]
    return gx_arr, ggamma_arr, gbeta_arr
