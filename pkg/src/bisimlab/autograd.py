"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an array and remembers how it was computed. Calling
``backward()`` on a scalar walks the graph in reverse topological order and
accumulates ``grad`` on every tensor that requires it. Broadcasting follows
numpy rules; gradients are summed back to the operand shapes.

Non-differentiable points use the subgradient that is zero at the kink
(``abs``, ``relu``, norms at the origin), so identical inputs produce zero
gradients instead of NaNs.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- bookkeeping --------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    @staticmethod
    def _make(data, parents, backward) -> Tensor:
        live = tuple(p for p in parents if p.requires_grad)
        if not live:
            return Tensor(data)
        return Tensor(data, True, parents, backward)

    def _accumulate(self, g: np.ndarray) -> None:
        # never updated in place, so aliasing an incoming array is safe
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=float))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are not needed after propagation
                node.grad = None

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, (a,), lambda g: a._accumulate(-g))

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))

        return Tensor._make(a.data - b.data, (a, b), bw)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out = a.data / b.data

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

        return Tensor._make(out, (a, b), bw)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, k: float):
        a = self
        k = float(k)

        def bw(g):
            a._accumulate(g * k * a.data ** (k - 1.0))

        return Tensor._make(a.data ** k, (a,), bw)

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return Tensor._make(a.data @ b.data, (a, b), bw)

    def __getitem__(self, idx):
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

        return Tensor._make(a.data[idx], (a,), bw)

    @property
    def T(self):
        a = self
        return Tensor._make(a.data.T, (a,), lambda g: a._accumulate(g.T))

    def reshape(self, *shape):
        a = self
        return Tensor._make(a.data.reshape(*shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise functions ----------------------------------------------

    def abs(self):
        a = self
        return Tensor._make(np.abs(a.data), (a,), lambda g: a._accumulate(g * np.sign(a.data)))

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)

        def bw(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                local = np.where(out > 0, 0.5 / out, 0.0)
            a._accumulate(g * local)

        return Tensor._make(out, (a,), bw)

    def exp(self):
        a = self
        out = np.exp(a.data)
        return Tensor._make(out, (a,), lambda g: a._accumulate(g * out))

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))

    def tanh(self):
        a = self
        out = np.tanh(a.data)
        return Tensor._make(out, (a,), lambda g: a._accumulate(g * (1.0 - out * out)))

    def sigmoid(self):
        a = self
        out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
        return Tensor._make(out, (a,), lambda g: a._accumulate(g * out * (1.0 - out)))

    def relu(self):
        a = self
        mask = a.data > 0
        return Tensor._make(a.data * mask, (a,), lambda g: a._accumulate(g * mask))

    def elu(self, alpha: float = 1.0):
        a = self
        neg = a.data < 0
        ex = np.exp(np.minimum(a.data, 0.0))
        out = np.where(neg, alpha * (ex - 1.0), a.data)
        return Tensor._make(out, (a,), lambda g: a._accumulate(g * np.where(neg, alpha * ex, 1.0)))

    def clamp_max(self, hi):
        """min(self, hi) for a constant ``hi``; gradient passes where self < hi."""
        a = self
        hi = np.asarray(hi, dtype=float)
        mask = a.data < hi
        return Tensor._make(np.minimum(a.data, hi), (a,), lambda g: a._accumulate(_unbroadcast(g * mask, a.shape)))

    def huber(self, delta: float = 1.0):
        """Elementwise Huber: x^2/2 inside [-delta, delta], delta(|x| - delta/2) outside."""
        a = self
        ax = np.abs(a.data)
        inside = ax <= delta
        out = np.where(inside, 0.5 * a.data ** 2, delta * (ax - 0.5 * delta))
        return Tensor._make(out, (a,), lambda g: a._accumulate(g * np.where(inside, a.data, delta * np.sign(a.data))))

    def norm(self, q: float = 2, axis: int = -1, keepdims: bool = False):
        """Row-wise q-norm (q in {1, 2}) with zero gradient at the origin."""
        a = self
        if q == 2:
            out = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

            def bw(g):
                if not keepdims:
                    g = np.expand_dims(g, axis)
                with np.errstate(divide="ignore", invalid="ignore"):
                    local = np.where(out > 0, a.data / out, 0.0)
                a._accumulate(g * local)
        elif q == 1:
            out = np.sum(np.abs(a.data), axis=axis, keepdims=True)

            def bw(g):
                if not keepdims:
                    g = np.expand_dims(g, axis)
                a._accumulate(g * np.sign(a.data))
        else:
            raise ValueError(f"unsupported norm order {q}")
        value = out if keepdims else np.squeeze(out, axis=axis)
        return Tensor._make(value, (a,), bw)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return Tensor._make(data, tuple(tensors), bw)


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Fused x @ W + b."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ W.data.T)
        if W.requires_grad:
            W._accumulate(x.data.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return Tensor._make(x.data @ W.data + b.data, (x, W, b), bw)


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(cond, 0.0, g), b.shape))

    return Tensor._make(np.where(cond, a.data, b.data), (a, b), bw)
