"""Pure-numpy reference implementations of the hot kernels.

All functions take and return C-contiguous float arrays with the reduced
axis last (inputs are pre-flattened to 2D by the dispatch layer). The
compiled backend in ``_fastkernels.pyx`` implements the same signatures.
"""

import numpy as np

# tanh approximation constants for GELU
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def softmax_fw(x):
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_bw(y, gy):
    inner = np.sum(gy * y, axis=-1, keepdims=True)
    return y * (gy - inner)


def log_softmax_fw(x):
    m = np.max(x, axis=-1, keepdims=True)
    s = x - m
    lse = np.log(np.sum(np.exp(s), axis=-1, keepdims=True))
    return s - lse


def log_softmax_bw(logp, gy):
    return gy - np.exp(logp) * np.sum(gy, axis=-1, keepdims=True)


def gelu_fw(x):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bw(x, gy):
    x2 = x * x
    u = _GELU_C * (x + _GELU_A * x * x2)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def layer_norm_fw(x, gamma, beta, eps):
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd


def layer_norm_bw(xhat, rstd, gamma, gy):
    gxhat = gy * gamma
    m1 = np.mean(gxhat, axis=-1, keepdims=True)
    m2 = np.mean(gxhat * xhat, axis=-1, keepdims=True)
    gx = rstd * (gxhat - m1 - xhat * m2)
    ggamma = np.sum(gy * xhat, axis=0)
    gbeta = np.sum(gy, axis=0)
    return gx, ggamma, gbeta
