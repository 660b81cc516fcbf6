"""Reverse-mode autodiff over a small numpy op set.

Every op builds a node recording its inputs and a closure that routes the
upstream gradient to them. ``backward()`` runs the closures in reverse
topological order. Broadcasting follows numpy; gradients of broadcast
operands are summed back to the operand's shape, which is what makes shared
parameters work under batched (B, K, F) inputs.
"""

from __future__ import annotations

import numpy as np


class NumericError(ArithmeticError):
    """Raised when a non-finite value is detected in a checked backward pass."""


def sigmoid(x):
    """Overflow-safe logistic; exp only ever sees non-positive arguments."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast(grad, shape):
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_op", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _op="leaf",
                 name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self._op = _op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op})"

    # ---- graph bookkeeping -------------------------------------------------

    def _child(self, data, parents, op):
        out = Tensor(data, requires_grad=any(p.requires_grad for p in parents),
                     _parents=parents, _op=op)
        return out

    def _accumulate(self, grad):
        if not self.requires_grad:
            return
        grad = _unbroadcast(grad, self.data.shape)
        self.grad = grad if self.grad is None else self.grad + grad

    def backward(self, seed=None, check_finite=False):
        topo, seen = [], set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for parent in node._parents:
                visit(parent)
            topo.append(node)

        visit(self)
        self.grad = np.ones_like(self.data) if seed is None else np.asarray(
            seed, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if check_finite:
                    for parent in node._parents:
                        if parent.grad is not None and not np.all(
                                np.isfinite(parent.grad)):
                            raise NumericError(
                                f"non-finite gradient entering {parent._op} "
                                f"(from {node._op})")

    # ---- arithmetic ----------------------------------------------------------

    @staticmethod
    def _lift(value):
        return value if isinstance(value, Tensor) else Tensor(value)

    def __add__(self, other):
        other = self._lift(other)
        out = self._child(self.data + other.data, (self, other), "add")

        def backward(grad):
            self._accumulate(grad)
            other._accumulate(grad)
        out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = self._child(-self.data, (self,), "neg")
        out._backward = lambda grad: self._accumulate(-grad)
        return out

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        out = self._child(self.data * other.data, (self, other), "mul")

        def backward(grad):
            self._accumulate(grad * other.data)
            other._accumulate(grad * self.data)
        out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        out = self._child(self.data / other.data, (self, other), "div")

        def backward(grad):
            self._accumulate(grad / other.data)
            other._accumulate(-grad * self.data / (other.data * other.data))
        out._backward = backward
        return out

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __matmul__(self, other):
        other = self._lift(other)
        out = self._child(self.data @ other.data, (self, other), "matmul")

        def backward(grad):
            self._accumulate(grad @ np.swapaxes(other.data, -1, -2))
            other._accumulate(np.swapaxes(self.data, -1, -2) @ grad)
        out._backward = backward
        return out

    # ---- shape ops -----------------------------------------------------------

    def transpose(self):
        """Swap the last two axes."""
        out = self._child(np.swapaxes(self.data, -1, -2), (self,), "transpose")
        out._backward = lambda grad: self._accumulate(np.swapaxes(grad, -1, -2))
        return out

    def reshape(self, *shape):
        out = self._child(self.data.reshape(*shape), (self,), "reshape")
        out._backward = lambda grad: self._accumulate(
            grad.reshape(self.data.shape))
        return out

    def sum(self, axis=None, keepdims=False):
        out = self._child(self.data.sum(axis=axis, keepdims=keepdims),
                          (self,), "sum")

        def backward(grad):
            if axis is not None and not keepdims:
                grad = np.expand_dims(grad, axis)
            self._accumulate(np.broadcast_to(grad, self.data.shape).copy())
        out._backward = backward
        return out

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            count = np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ---- nonlinearities --------------------------------------------------------

    def relu(self):
        out = self._child(np.maximum(self.data, 0.0), (self,), "relu")
        out._backward = lambda grad: self._accumulate(grad * (self.data > 0))
        return out

    def sigmoid(self):
        value = sigmoid(self.data)
        out = self._child(value, (self,), "sigmoid")
        out._backward = lambda grad: self._accumulate(
            grad * value * (1.0 - value))
        return out

    def tanh(self):
        value = np.tanh(self.data)
        out = self._child(value, (self,), "tanh")
        out._backward = lambda grad: self._accumulate(
            grad * (1.0 - value * value))
        return out

    def exp(self):
        value = np.exp(self.data)
        out = self._child(value, (self,), "exp")
        out._backward = lambda grad: self._accumulate(grad * value)
        return out

    def abs(self):
        out = self._child(np.abs(self.data), (self,), "abs")
        out._backward = lambda grad: self._accumulate(grad * np.sign(self.data))
        return out


def concat(tensors, axis=-1):
    tensors = [Tensor._lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor(data, requires_grad=any(t.requires_grad for t in tensors),
                 _parents=tuple(tensors), _op="concat")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(grad):
        for tensor, piece in zip(tensors, np.split(grad, splits, axis=axis)):
            tensor._accumulate(piece)
    out._backward = backward
    return out


ACTIVATIONS = {
    "relu": Tensor.relu,
    "sigmoid": Tensor.sigmoid,
    "tanh": Tensor.tanh,
    "linear": lambda t: t,
}

# Activation forward, and its derivative written in terms of the output value
# (all four admit that form), for the fused ops below.
_ACT = {
    "relu": (lambda x: np.maximum(x, 0.0), lambda y: y > 0),
    "sigmoid": (sigmoid, lambda y: y * (1.0 - y)),
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "linear": (lambda x: x, None),
}


def linear(parts, w, b, activation="linear"):
    """act(concat(parts) @ w + b) as a single taped node.

    The layer stacks spend most of their time in graph bookkeeping, not
    arithmetic, so the affine step is fused: the backward routes column
    blocks of grad @ w.T straight to each input and collapses the batch
    axes with one flat matmul for the weight gradient.
    """
    act, act_vjp = _ACT[activation]
    parts = [Tensor._lift(p) for p in parts]
    datas = [p.data for p in parts]
    cat = datas[0] if len(datas) == 1 else np.concatenate(datas, axis=-1)
    # One flat GEMM instead of numpy's per-batch matmul loop.
    fan_in, fan_out = w.data.shape
    flat_cat = cat.reshape(-1, fan_in)
    value = act((flat_cat @ w.data + b.data).reshape(*cat.shape[:-1], fan_out))
    parents = (*parts, w, b)
    out = Tensor(value, requires_grad=any(p.requires_grad for p in parents),
                 _parents=parents, _op=f"linear[{activation}]")

    def backward(grad):
        if act_vjp is not None:
            grad = grad * act_vjp(value)
        flat = grad.reshape(-1, fan_out)
        if w.requires_grad or b.requires_grad:
            w._accumulate(flat_cat.T @ flat)
            b._accumulate(flat.sum(axis=0))
        if any(p.requires_grad for p in parts):
            gcat = (flat @ w.data.T).reshape(cat.shape)
            offset = 0
            for part, data in zip(parts, datas):
                size = data.shape[-1]
                if part.requires_grad:
                    part._accumulate(gcat[..., offset:offset + size])
                offset += size
    out._backward = backward
    return out
