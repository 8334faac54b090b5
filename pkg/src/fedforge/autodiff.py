"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Only the handful of ops the toy classifiers and the trigger loss need are
provided.  Every op returns a new :class:`Tensor` holding a closure that
pushes the upstream gradient into its parents.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    def __init__(self, what, expected, actual):
        super().__init__(f"{what}: expected shape {tuple(expected)}, got {tuple(actual)}")
        self.expected = tuple(expected)
        self.actual = tuple(actual)


class NonFiniteError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward

    @classmethod
    def external(cls, data, requires_grad=False):
        """Wrap user-supplied data, rejecting NaN/Inf."""
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        return cls(arr, requires_grad=requires_grad)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_lift(other), _lift(-1.0)))

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, _parents=(a, b), _backward=backward)


def mul(a, b):
    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, _parents=(a, b), _backward=backward)


def matmul(a, b):
    if a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul inner dimension", (a.shape[-1],), (b.shape[0],))

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(a.data @ b.data, _parents=(a, b), _backward=backward)


def relu(a):
    on = a.data > 0

    def backward(g):
        return (g * on,)

    return Tensor(np.where(on, a.data, 0.0), _parents=(a,), _backward=backward)


def reshape(a, shape):
    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor(a.data.reshape(shape), _parents=(a,), _backward=backward)


def conv3x3(x, w, b):
    """Same-padded 3x3 convolution, NHWC input, weights (3, 3, C_in, C_out)."""
    n, h, wd, c = x.shape
    if w.shape[:3] != (3, 3, c):
        raise ShapeError("conv3x3 weight", (3, 3, c, w.shape[-1]), w.shape)
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(b.data, (n, h, wd, w.shape[3])).copy()
    for di in range(3):
        for dj in range(3):
            out += xp[:, di:di + h, dj:dj + wd, :] @ w.data[di, dj]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        g2 = g.reshape(-1, g.shape[-1])
        for di in range(3):
            for dj in range(3):
                patch = xp[:, di:di + h, dj:dj + wd, :].reshape(-1, c)
                gw[di, dj] = patch.T @ g2
                gxp[:, di:di + h, dj:dj + wd, :] += g @ w.data[di, dj].T
        return gxp[:, 1:-1, 1:-1, :], gw, g.sum(axis=(0, 1, 2))

    return Tensor(out, _parents=(x, w, b), _backward=backward)


def avgpool2(x):
    """2x2 average pooling with stride 2; odd trailing rows/cols are dropped."""
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    cropped = x.data[:, : 2 * h2, : 2 * w2, :]
    out = cropped.reshape(n, h2, 2, w2, 2, c).mean(axis=(2, 4))

    def backward(g):
        gx = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0
        gx[:, : 2 * h2, : 2 * w2, :] = spread
        return (gx,)

    return Tensor(out, _parents=(x,), _backward=backward)


def blend(x, mask, pattern):
    """(1 - mask) * x + mask * pattern, with pattern broadcast over the batch."""

    def backward(g):
        gx = g * (1.0 - mask.data)
        gp = _unbroadcast(g * mask.data, pattern.shape)
        return gx, None, gp

    out = (1.0 - mask.data) * x.data + mask.data * pattern.data
    return Tensor(out, _parents=(x, mask, pattern), _backward=backward)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy.

    Returns the scalar loss tensor and the per-sample losses (numpy) so
    callers can locate non-finite entries.
    """
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    per_sample = logsumexp - shifted[np.arange(n), labels]
    probs = np.exp(shifted - logsumexp[:, None])

    def backward(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    loss = Tensor(np.array(per_sample.mean()), _parents=(logits,), _backward=backward)
    return loss, per_sample
