"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward closure on the output
tensor.  ``backward`` on a scalar walks the recorded graph in reverse
topological order, keeping pass-local gradients for interior nodes and
accumulating additively into ``.grad`` of the requires_grad leaves.  Running
backward twice therefore exactly doubles leaf gradients.

Shapes are plain row-major numpy arrays; there is no broadcasting beyond the
few explicit helpers (scalar-by-array multiply, row-vector add).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError, DegenerateInputError

LAYER_NORM_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor of shape {arr.shape} contains NaN/Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def is_leaf(self):
        return not self._parents

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, bw):
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=bw)
    return Tensor(data)


def backward(loss):
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones((), dtype=np.float64)}

    def accum(t, g):
        if not t.requires_grad:
            return
        key = id(t)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf():
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node._backward(g, accum)


# ---------------------------------------------------------------------------
# elementwise and structural operations


def _scalar_compatible(a, b):
    return a.shape == b.shape or a.shape == () or b.shape == ()


def add(a, b):
    if not _scalar_compatible(a, b):
        raise ShapeError(f"add: {a.shape} vs {b.shape}")

    def bw(g, accum):
        accum(a, g if a.shape == g.shape else np.sum(g))
        accum(b, g if b.shape == g.shape else np.sum(g))

    return _make(a.data + b.data, (a, b), bw)


def neg(a):
    def bw(g, accum):
        accum(a, -g)

    return _make(-a.data, (a,), bw)


def mul(a, b):
    if not _scalar_compatible(a, b):
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")

    def bw(g, accum):
        ga = g * b.data
        gb = g * a.data
        accum(a, ga if a.shape == ga.shape else np.sum(ga))
        accum(b, gb if b.shape == gb.shape else np.sum(gb))

    return _make(a.data * b.data, (a, b), bw)


def scale(a, c):
    c = float(c)

    def bw(g, accum):
        accum(a, g * c)

    return _make(a.data * c, (a,), bw)


def relu(a):
    mask = a.data > 0.0

    def bw(g, accum):
        accum(a, g * mask)

    return _make(a.data * mask, (a,), bw)


def exp(a):
    out = np.exp(a.data)

    def bw(g, accum):
        accum(a, g * out)

    return _make(out, (a,), bw)


def log(a):
    def bw(g, accum):
        accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


def tsum(a):
    def bw(g, accum):
        accum(a, np.full(a.shape, g, dtype=np.float64))

    return _make(np.sum(a.data), (a,), bw)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} vs {b.shape}")

    def bw(g, accum):
        accum(a, g @ b.data.T)
        accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def transpose(a):
    if a.ndim != 2:
        raise ShapeError("transpose needs a 2-D tensor")

    def bw(g, accum):
        accum(a, g.T)

    return _make(a.data.T.copy(), (a,), bw)


def reshape(a, shape):
    def bw(g, accum):
        accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def narrow(a, axis, start, stop):
    """Contiguous slice [start:stop) along one axis."""
    if not (0 <= start < stop <= a.shape[axis]):
        raise ShapeError(f"narrow [{start}:{stop}) out of range for axis {axis} of {a.shape}")
    idx = tuple(slice(None) if ax != axis else slice(start, stop) for ax in range(a.ndim))

    def bw(g, accum):
        full = np.zeros(a.shape, dtype=np.float64)
        full[idx] = g
        accum(a, full)

    return _make(a.data[idx].copy(), (a,), bw)


def concat(tensors, axis):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g, accum):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = tuple(slice(None) if ax != axis else slice(lo, hi) for ax in range(t.ndim))
            accum(t, g[idx])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def element(a, index):
    """Single element as a scalar tensor; ``index`` is a flat index."""
    flat_index = int(index)

    def bw(g, accum):
        full = np.zeros(a.size, dtype=np.float64)
        full[flat_index] = g
        accum(a, full.reshape(a.shape))

    return _make(a.data.reshape(-1)[flat_index], (a,), bw)


def add_rowvec(x, b):
    """x[T, d] + b[d] broadcast over rows."""
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_rowvec: {x.shape} vs {b.shape}")

    def bw(g, accum):
        accum(x, g)
        accum(b, g.sum(axis=0))

    return _make(x.data + b.data, (x, b), bw)


# ---------------------------------------------------------------------------
# normalizers and pooling


def softmax(a, axis=-1):
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g, accum):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        accum(a, out * (g - dot))

    return _make(out, (a,), bw)


def log_softmax(a, axis=-1):
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g, accum):
        accum(a, g - probs * np.sum(g, axis=axis, keepdims=True))

    return _make(out, (a,), bw)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    """Per-row normalization of x[T, d], then affine by gain/bias[d]."""
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gain.data + bias.data

    def bw(g, accum):
        dxhat = g * gain.data
        accum(
            x,
            inv_std
            * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            ),
        )
        accum(gain, np.sum(g * xhat, axis=0))
        accum(bias, np.sum(g, axis=0))

    return _make(out, (x, gain, bias), bw)


def masked_mean_pool(x, valid_len):
    """Mean over the first valid_len rows of x[T, d]."""
    if x.ndim != 2:
        raise ShapeError("masked_mean_pool needs a 2-D tensor")
    valid_len = int(valid_len)
    if valid_len == 0:
        raise DegenerateInputError("masked_mean_pool with valid_len=0")
    if not 0 < valid_len <= x.shape[0]:
        raise ShapeError(f"valid_len {valid_len} out of range for {x.shape}")

    def bw(g, accum):
        full = np.zeros(x.shape, dtype=np.float64)
        full[:valid_len] = g / valid_len
        accum(x, full)

    return _make(x.data[:valid_len].mean(axis=0), (x,), bw)
