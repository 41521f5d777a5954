"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation records its inputs on an implicit tape (the graph of
``Value`` nodes), and every backward rule is itself built from these same
operations. Gradients therefore live on the tape too, so a scalar function
of a gradient can be differentiated again -- the gradient-matching distance
and the trajectory regularizer both need that.

All math is 64-bit. ReLU's backward uses a constant mask, so its second
derivative is treated as zero everywhere (exact almost everywhere).
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when an operation receives arrays of incompatible shape."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Value:
    """A node on the tape: a float64 array plus backward plumbing.

    ``grad`` is populated (as a plain array of the same shape) by
    :func:`backward`. Nodes created without parents are leaves.
    """

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data, _parents=(), _vjp=None):
        self.data = _as_array(data)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

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

    def detach(self) -> "Value":
        """A leaf copy of this node; gradients do not flow past it."""
        return Value(self.data)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_value(other)))

    def __rsub__(self, other):
        return add(as_value(other), neg(self))

    def __truediv__(self, other):
        if isinstance(other, Value):
            return mul(self, powc(other, -1.0))
        return mul(self, 1.0 / _as_array(other))

    def __rtruediv__(self, other):
        return mul(powc(self, -1.0), other)

    def __pow__(self, p):
        return powc(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def __repr__(self):
        return f"Value(shape={self.data.shape}, leaf={self._vjp is None})"


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


# -- backward pass -------------------------------------------------------


def _topo_order(root: Value) -> list:
    """Parents-before-children ordering of the subgraph under ``root``."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Value) -> dict:
    """Backpropagate from a scalar root through the tape.

    Returns a map node -> gradient ``Value`` (d root / d node) for every
    node reachable from the root, and stores the plain-array gradient on
    each node's ``grad``. The returned gradients are tape nodes themselves,
    so they can be fed into further differentiable computation.
    """
    if root.data.ndim != 0:
        raise ShapeError(f"backward requires a scalar root, got shape {root.data.shape}")
    order = _topo_order(root)
    grads: dict[int, list] = {id(root): [root, Value(np.ones(()))]}
    for node in reversed(order):
        entry = grads.get(id(node))
        if entry is None or node._vjp is None:
            continue
        parent_grads = node._vjp(entry[1])
        for parent, pgrad in zip(node._parents, parent_grads):
            if pgrad is None:
                continue
            slot = grads.get(id(parent))
            if slot is None:
                grads[id(parent)] = [parent, pgrad]
            else:
                slot[1] = add(slot[1], pgrad)
    result = {}
    for node, grad in grads.values():
        node.grad = grad.data
        result[node] = grad
    return result


# -- broadcasting helper --------------------------------------------------


def _sum_to(g: Value, shape: tuple) -> Value:
    """Reduce a broadcast gradient back to the source shape."""
    if g.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    axes = list(range(extra))
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[extra + i] != 1:
            axes.append(extra + i)
    out = vsum(g, axis=tuple(axes)) if axes else g
    if out.shape != shape:
        out = reshape(out, shape)
    return out


# -- primitive operations --------------------------------------------------


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = Value(a.data + b.data, (a, b))
    out._vjp = lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape))
    return out


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = Value(a.data * b.data, (a, b))
    out._vjp = lambda g: (_sum_to(mul(g, b), a.shape), _sum_to(mul(g, a), b.shape))
    return out


def neg(x: Value) -> Value:
    x = as_value(x)
    out = Value(-x.data, (x,))
    out._vjp = lambda g: (neg(g),)
    return out


def powc(x: Value, p: float) -> Value:
    """Elementwise power with a constant exponent."""
    x = as_value(x)
    out = Value(x.data ** p, (x,))
    if p == 2.0:
        out._vjp = lambda g: (mul(g, mul(x, 2.0)),)
    elif p == 1.0:
        out._vjp = lambda g: (g,)
    else:
        out._vjp = lambda g: (mul(g, mul(powc(x, p - 1.0), p)),)
    return out


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    out = Value(a.data @ b.data, (a, b))
    out._vjp = lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g))
    return out


def transpose(x: Value, axes=None) -> Value:
    x = as_value(x)
    out = Value(x.data.transpose(axes), (x,))
    inv = None if axes is None else tuple(np.argsort(axes))
    out._vjp = lambda g: (transpose(g, inv),)
    return out


def reshape(x: Value, shape) -> Value:
    x = as_value(x)
    out = Value(x.data.reshape(shape), (x,))
    out._vjp = lambda g: (reshape(g, x.shape),)
    return out


def broadcast_to(x: Value, shape) -> Value:
    x = as_value(x)
    out = Value(np.broadcast_to(x.data, shape), (x,))
    out._vjp = lambda g: (_sum_to(g, x.shape),)
    return out


def vsum(x: Value, axis=None, keepdims=False) -> Value:
    x = as_value(x)
    out = Value(x.data.sum(axis=axis, keepdims=keepdims), (x,))

    def vjp(g):
        gd = g
        if not keepdims:
            if axis is None:
                gd = reshape(g, (1,) * x.data.ndim) if x.data.ndim else g
            else:
                axes = axis if isinstance(axis, tuple) else (axis,)
                kd = list(x.shape)
                for ax in axes:
                    kd[ax % x.data.ndim] = 1
                gd = reshape(g, tuple(kd))
        return (broadcast_to(gd, x.shape),)

    out._vjp = vjp
    return out


def vmean(x: Value, axis=None, keepdims=False) -> Value:
    x = as_value(x)
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[ax % x.data.ndim] for ax in axes]))
    return mul(vsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(x: Value) -> Value:
    x = as_value(x)
    out = Value(np.exp(x.data), (x,))
    out._vjp = lambda g: (mul(g, out),)
    return out


def log(x: Value) -> Value:
    x = as_value(x)
    out = Value(np.log(x.data), (x,))
    out._vjp = lambda g: (mul(g, powc(x, -1.0)),)
    return out


def sqrt(x: Value) -> Value:
    x = as_value(x)
    out = Value(np.sqrt(x.data), (x,))
    out._vjp = lambda g: (mul(g, mul(powc(out, -1.0), 0.5)),)
    return out


def tanh(x: Value) -> Value:
    x = as_value(x)
    out = Value(np.tanh(x.data), (x,))
    out._vjp = lambda g: (mul(g, add(1.0, neg(mul(out, out)))),)
    return out


def sigmoid(x: Value) -> Value:
    x = as_value(x)
    out = Value(1.0 / (1.0 + np.exp(-x.data)), (x,))
    out._vjp = lambda g: (mul(g, mul(out, add(1.0, neg(out)))),)
    return out


def relu(x: Value) -> Value:
    x = as_value(x)
    mask = (x.data > 0).astype(np.float64)
    out = Value(x.data * mask, (x,))
    out._vjp = lambda g: (mul(g, mask),)
    return out


def clip(x: Value, lo: float, hi: float) -> Value:
    """Clamp to [lo, hi]; gradient is zero in the clamped region."""
    x = as_value(x)
    mask = ((x.data > lo) & (x.data < hi)).astype(np.float64)
    out = Value(np.clip(x.data, lo, hi), (x,))
    out._vjp = lambda g: (mul(g, mask),)
    return out


# -- image patch extraction (convolution support) --------------------------


def _im2col_data(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh, ow = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, k, k, oh, ow), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + oh, j : j + ow]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * k * k)


def _col2im_data(cols: np.ndarray, x_shape: tuple, k: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh, ow = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = cols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + oh, j : j + ow] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w] if pad else xp


def im2col(x: Value, k: int, pad: int) -> Value:
    """Unfold (N,C,H,W) into rows of k-by-k patches, stride 1."""
    x = as_value(x)
    if x.data.ndim != 4:
        raise ShapeError(f"im2col expects a (N,C,H,W) input, got {x.shape}")
    x_shape = x.shape
    out = Value(_im2col_data(x.data, k, pad), (x,))
    out._vjp = lambda g: (col2im(g, x_shape, k, pad),)
    return out


def col2im(cols: Value, x_shape: tuple, k: int, pad: int) -> Value:
    """Adjoint of :func:`im2col`: scatter-add patch rows back to an image."""
    cols = as_value(cols)
    out = Value(_col2im_data(cols.data, x_shape, k, pad), (cols,))
    out._vjp = lambda g: (im2col(g, k, pad),)
    return out


def conv2d(x: Value, w: Value, b: Value, pad: int = 1) -> Value:
    """Stride-1 2-D convolution: x (N,C,H,W), w (F,C,k,k), b (F,)."""
    x, w, b = as_value(x), as_value(w), as_value(b)
    n, c, h, wd = x.shape
    f, c2, k, _ = w.shape
    if c2 != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {c2}")
    oh, ow = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    cols = im2col(x, k, pad)
    out = add(matmul(cols, transpose(reshape(w, (f, c * k * k)))), b)
    return transpose(reshape(out, (n, oh, ow, f)), (0, 3, 1, 2))
