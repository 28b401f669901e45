"""Kernel backend selection.

The row-wise hot kernels (softmax, log-softmax, layer norm, GELU) exist
twice: a compiled Cython extension (``_fastkernels``) and a pure-numpy
fallback (``kernels_py``). The compiled one is picked at import when
available; set ``COHORTMIL_BACKEND=python`` or ``=compiled`` to force a
choice. ``benchmarks/bench_kernels.py`` compares the two.

All dispatch functions accept ND arrays with the reduced axis last and
any float dtype; the compiled path only handles float64 and the fallback
covers the rest.
"""

import os

import numpy as np

from . import kernels_py as _py

_requested = os.environ.get("COHORTMIL_BACKEND", "auto").lower()
_fast = None
if _requested in ("auto", "compiled"):
    try:
        from . import _fastkernels as _fast  # type: ignore[no-redef]
    except ImportError:
        _fast = None
        if _requested == "compiled":
            raise ImportError(
                "COHORTMIL_BACKEND=compiled but the _fastkernels extension "
                "is not built; install the package with its setup.py build"
            )

ACTIVE_BACKEND = "compiled" if _fast is not None else "python"


def _rows(x):
    """View of x flattened to (rows, last_axis), C-contiguous."""
    x = np.ascontiguousarray(x)
    return x.reshape(-1, x.shape[-1])


def _use_fast(*arrays):
    return _fast is not None and all(a.dtype == np.float64 for a in arrays)


def softmax(x):
    if _use_fast(x):
        return _fast.softmax_fw(_rows(x)).reshape(x.shape)
    return _py.softmax_fw(x)


def softmax_grad(y, gy):
    if _use_fast(y, gy):
        return _fast.softmax_bw(_rows(y), _rows(gy)).reshape(y.shape)
    return _py.softmax_bw(y, gy)


def log_softmax(x):
    if _use_fast(x):
        return _fast.log_softmax_fw(_rows(x)).reshape(x.shape)
    return _py.log_softmax_fw(x)


def log_softmax_grad(logp, gy):
    if _use_fast(logp, gy):
        return _fast.log_softmax_bw(_rows(logp), _rows(gy)).reshape(logp.shape)
    return _py.log_softmax_bw(logp, gy)


def gelu(x):
    # numpy's vectorized tanh beats a scalar loop here (see bench_kernels);
    # the fused backward below is where the extension pays off
    return _py.gelu_fw(x)


def gelu_grad(x, gy):
    if _use_fast(x, gy):
        flat = _fast.gelu_bw(
            np.ascontiguousarray(x).reshape(-1),
            np.ascontiguousarray(gy).reshape(-1),
        )
        return flat.reshape(x.shape)
    return _py.gelu_bw(x, gy)


def layer_norm(x, gamma, beta, eps):
    if _use_fast(x, gamma, beta):
        y, xhat, rstd = _fast.layer_norm_fw(_rows(x), gamma, beta, eps)
        aux_shape = x.shape[:-1] + (1,)
        return y.reshape(x.shape), xhat.reshape(x.shape), rstd.reshape(aux_shape)
    return _py.layer_norm_fw(x, gamma, beta, eps)


def layer_norm_grad(xhat, rstd, gamma, gy):
    if _use_fast(xhat, rstd, gamma, gy):
        gx, ggamma, gbeta = _fast.layer_norm_bw(
            _rows(xhat), np.ascontiguousarray(rstd).reshape(-1, 1), gamma, _rows(gy)
        )
        return gx.reshape(xhat.shape), ggamma, gbeta
    # the numpy path sums gamma/beta grads over axis 0 only; pre-flatten
    gx, ggamma, gbeta = _py.layer_norm_bw(_rows(xhat), np.ascontiguousarray(rstd).reshape(-1, 1), gamma, _rows(gy))
    return gx.reshape(xhat.shape), ggamma, gbeta
