"""Define-by-run reverse-mode autodiff over dense numpy arrays.

A ``Graph`` is a tape: ops execute eagerly through numpy (and the kernel
backend) and record a VJP closure per node. Graphs are rebuilt per batch,
which is what lets cohort routing change the topology sample to sample.
``backward`` walks the tape once in reverse and returns a gradient per
named leaf; leaves with no path to the output get exact zeros.

Tensors are immutable values; a graph instance must stay on one thread
during forward/backward.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from . import backend


class DiffError(Exception):
    """Base error for graph construction and execution failures."""


class ShapeError(DiffError):
    pass


class NumericError(DiffError):
    pass


class Tensor:
    """A node in a computation graph, holding a dense numpy value."""

    __slots__ = ("graph", "nid", "data")

    def __init__(self, graph: "Graph", nid: int, data: np.ndarray):
        self.graph = graph
        self.nid = nid
        self.data = data

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(nid={self.nid}, shape={self.shape})"

    # operator sugar; scalars and arrays become constants on the same graph
    def __add__(self, other):
        return add(self, _coerce(self.graph, other))

    def __radd__(self, other):
        return add(_coerce(self.graph, other), self)

    def __sub__(self, other):
        return sub(self, _coerce(self.graph, other))

    def __rsub__(self, other):
        return sub(_coerce(self.graph, other), self)

    def __mul__(self, other):
        return mul(self, _coerce(self.graph, other))

    def __rmul__(self, other):
        return mul(_coerce(self.graph, other), self)

    def __truediv__(self, other):
        return div(self, _coerce(self.graph, other))

    def __rtruediv__(self, other):
        return div(_coerce(self.graph, other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class _Node:
    __slots__ = ("op", "parents", "vjp", "needs_grad", "leaf_name", "trainable")

    def __init__(self, op, parents, vjp, needs_grad, leaf_name=None, trainable=False):
        self.op = op
        self.parents = parents          # tuple of parent nids
        self.vjp = vjp                  # grad_out -> tuple of parent grads (or None per parent)
        self.needs_grad = needs_grad
        self.leaf_name = leaf_name
        self.trainable = trainable


class Gradients:
    """Backward results: lookup by Tensor or by leaf name."""

    def __init__(self, by_nid: dict, name_to_nid: dict):
        self._by_nid = by_nid
        self._names = name_to_nid

    def __getitem__(self, key) -> np.ndarray:
        if isinstance(key, Tensor):
            return self._by_nid[key.nid]
        return self._by_nid[self._names[key]]

    def __contains__(self, key) -> bool:
        if isinstance(key, Tensor):
            return key.nid in self._by_nid
        return key in self._names

    def names(self):
        return list(self._names)

    def named(self) -> dict[str, np.ndarray]:
        return {name: self._by_nid[nid] for name, nid in self._names.items()}


class Graph:
    """Tape of executed ops. Build leaves, compose ops, then backward()."""

    def __init__(self, dtype=np.float64, check_finite: bool = True):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self._nodes: list[_Node] = []
        self._values: list[np.ndarray] = []
        self._leaf_names: dict[str, int] = {}

    # -- leaf construction -------------------------------------------------

    def leaf(self, data, name: str | None = None, trainable: bool = True) -> Tensor:
        arr = np.asarray(data, dtype=self.dtype)
        if name is not None:
            if name in self._leaf_names:
                raise DiffError(f"duplicate leaf name {name!r}")
            self._leaf_names[name] = len(self._nodes)
        node = _Node("leaf", (), None, trainable, leaf_name=name, trainable=trainable)
        return self._append(node, arr)

    def constant(self, data) -> Tensor:
        return self.leaf(data, name=None, trainable=False)

    def bind(self, params: Mapping[str, np.ndarray], trainable: bool = True) -> dict[str, Tensor]:
        """Enter every array of a parameter store as a named leaf."""
        return {k: self.leaf(v, name=k, trainable=trainable) for k, v in params.items()}

    # -- internals ----------------------------------------------------------

    def _append(self, node: _Node, value: np.ndarray) -> Tensor:
        nid = len(self._nodes)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite output of op {node.op!r} at node {nid}")
        self._nodes.append(node)
        self._values.append(value)
        return Tensor(self, nid, value)

    def _record(self, op: str, parents: Sequence[Tensor], value: np.ndarray,
                vjp: Callable | None) -> Tensor:
        for p in parents:
            if p.graph is not self:
                raise DiffError(f"op {op!r}: input tensor belongs to another graph")
        needs = any(self._nodes[p.nid].needs_grad for p in parents)
        node = _Node(op, tuple(p.nid for p in parents), vjp if needs else None, needs)
        return self._append(node, value)

    # -- backward -----------------------------------------------------------

    def backward(self, output: Tensor, seed=None) -> Gradients:
        """Gradient of ``output`` w.r.t. every leaf, seeded by ``seed``.

        Unreached trainable leaves and all non-trainable leaves report
        exact zeros.
        """
        if output.graph is not self:
            raise DiffError("output tensor does not belong to this graph")
        if seed is None:
            seed_arr = np.ones_like(output.data)
        else:
            seed_arr = np.asarray(seed, dtype=self.dtype)
            if seed_arr.shape != output.data.shape:
                raise ShapeError(
                    f"seed shape {seed_arr.shape} does not match output shape {output.data.shape}"
                )

        # reachable subset that actually needs gradients
        active = np.zeros(len(self._nodes), dtype=bool)
        stack = [output.nid]
        while stack:
            nid = stack.pop()
            node = self._nodes[nid]
            if active[nid] or not node.needs_grad:
                continue
            active[nid] = True
            stack.extend(node.parents)

        grads: dict[int, np.ndarray] = {}
        if active[output.nid]:
            grads[output.nid] = seed_arr
        for nid in range(output.nid, -1, -1):
            if not active[nid] or nid not in grads:
                continue
            node = self._nodes[nid]
            if node.vjp is None:
                continue
            parent_grads = node.vjp(grads[nid])
            for pid, g in zip(node.parents, parent_grads):
                if g is None or not active[pid]:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + g
                else:
                    grads[pid] = g

        out: dict[int, np.ndarray] = {}
        for nid, node in enumerate(self._nodes):
            if node.op != "leaf":
                continue
            if node.trainable and nid in grads:
                out[nid] = grads[nid]
            else:
                out[nid] = np.zeros_like(self._values[nid])
        return Gradients(out, dict(self._leaf_names))


def _coerce(graph: Graph, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return graph.constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic --------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    value = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return a.graph._record("add", (a, b), value, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    value = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return a.graph._record("sub", (a, b), value, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    value = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return a.graph._record("mul", (a, b), value, vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    with np.errstate(all="ignore"):
        value = a.data / b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    return a.graph._record("div", (a, b), value, vjp)


def neg(a: Tensor) -> Tensor:
    return a.graph._record("neg", (a,), -a.data, lambda g: (-g,))


# -- linear algebra / structure ----------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    value = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return ga, gb

    return a.graph._record("matmul", (a, b), value, vjp)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2D, got {a.shape}")
    return a.graph._record("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def swap_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"swap_last2: expected >=2D, got {a.shape}")
    value = np.swapaxes(a.data, -1, -2).copy()
    return a.graph._record("swap_last2", (a,), value, lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    value = a.data.reshape(shape)
    old = a.shape
    return a.graph._record("reshape", (a,), value, lambda g: (g.reshape(old),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        value = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    old = a.shape
    return a.graph._record("broadcast_to", (a,), value, lambda g: (_unbroadcast(g, old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    value = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return tensors[0].graph._record("concat", tuple(tensors), value, vjp)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows of a 2D tensor by index; backward scatter-adds."""
    if a.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2D, got {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    value = a.data[idx].copy()
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return a.graph._record("gather_rows", (a,), value, vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(
            f"narrow: [{start}:{start + length}] out of range for axis {axis} of {a.shape}"
        )
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    value = a.data[idx].copy()
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return a.graph._record("narrow", (a,), value, vjp)


# -- reductions ---------------------------------------------------------------

def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    value = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(np.asarray(g), shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, shape).copy(),)

    return a.graph._record("sum", (a,), value, vjp)


def mean_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    value = np.mean(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape
    count = a.size if axis is None else shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge / count, shape).copy(),)

    return a.graph._record("mean", (a,), value, vjp)


def max_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Max reduction; gradient routes to the first (lowest-index) maximum."""
    value = np.max(a.data, axis=axis, keepdims=keepdims)
    data = a.data

    def vjp(g):
        mask = np.zeros(data.shape, dtype=data.dtype)
        if axis is None:
            flat_idx = int(np.argmax(data))
            mask.reshape(-1)[flat_idx] = 1.0
            return (mask * g,)
        idx = np.expand_dims(np.argmax(data, axis=axis), axis)
        np.put_along_axis(mask, idx, 1.0, axis=axis)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (mask * ge,)

    return a.graph._record("max", (a,), value, vjp)


# -- nonlinearities ------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        value = np.exp(a.data)
    return a.graph._record("exp", (a,), value, lambda g: (g * value,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(all="ignore"):
        value = np.log(ad)
    return a.graph._record("log", (a,), value, lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    value = np.tanh(a.data)
    return a.graph._record("tanh", (a,), value, lambda g: (g * (1.0 - value * value),))


def sigmoid(a: Tensor) -> Tensor:
    value = 1.0 / (1.0 + np.exp(-a.data))
    return a.graph._record("sigmoid", (a,), value, lambda g: (g * value * (1.0 - value),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    value = np.maximum(ad, 0.0)
    return a.graph._record("relu", (a,), value, lambda g: (g * (ad > 0.0),))


def gelu(a: Tensor) -> Tensor:
    ad = a.data
    value = backend.gelu(ad)
    return a.graph._record("gelu", (a,), value, lambda g: (backend.gelu_grad(ad, g),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    value = backend.softmax(a.data)
    return a.graph._record("softmax", (a,), value, lambda g: (backend.softmax_grad(value, g),))


def log_softmax(a: Tensor) -> Tensor:
    value = backend.log_softmax(a.data)
    return a.graph._record(
        "log_softmax", (a,), value, lambda g: (backend.log_softmax_grad(value, g),)
    )


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with affine parameters."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape}/{beta.shape}"
        )
    value, xhat, rstd = backend.layer_norm(x.data, gamma.data, beta.data, eps)
    gd = gamma.data

    def vjp(g):
        return backend.layer_norm_grad(xhat, rstd, gd, g)

    return x.graph._record("layer_norm", (x, gamma, beta), value, vjp)


def clip(a: Tensor, lo: float | None, hi: float | None) -> Tensor:
    """Clamp to [lo, hi]; gradient is 1 inside the closed interval, exactly 0 outside."""
    ad = a.data
    value = np.clip(ad, lo, hi)
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi
    mask = ((ad >= lo_v) & (ad <= hi_v)).astype(ad.dtype)
    return a.graph._record("clip", (a,), value, lambda g: (g * mask,))


# -- test oracle ----------------------------------------------------------------

def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, same shape as x."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value while probing coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
