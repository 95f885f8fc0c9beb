"""Dense tensors with reverse-mode automatic differentiation.

The computation graph is implicit: every operation records its parent
tensors and a backward closure, and ``backward()`` replays the closures in
reverse topological order.  Leaves created with ``requires_grad=True``
accumulate gradients in ``.grad``.

Only the operations the segmentation models need exist; there is no
general broadcasting.  Elementwise binary ops require identical shapes
(scalars are allowed), structured ops (convolution, pooling, ...) live in
:mod:`locseg.ops`.

Default precision is float32; pass float64 arrays for tighter gradient
checks.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """N-dimensional array node in the autodiff graph.

    ``data`` and ``grad`` (once populated) always share shape and dtype.
    Tensors are treated as immutable after creation; only optimizer steps
    write into leaf ``data`` in-place.
    """

    no_grad_mode = False

    def __init__(self, data, requires_grad=False, parents=(), op=""):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        if isinstance(data, (np.ndarray, np.generic)):
            data = np.asarray(data)
            if not np.issubdtype(data.dtype, np.floating):
                data = data.astype(np.float32)
        else:
            data = np.asarray(data, dtype=np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = None
        self._op = op

    # -- construction helpers -------------------------------------------------

    @classmethod
    def zeros(cls, shape, dtype=np.float32, requires_grad=False):
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, dtype=np.float32, requires_grad=False):
        return cls(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def from_array(cls, array, requires_grad=False):
        return cls(np.asarray(array), requires_grad=requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self._op!r}{grad})"

    # -- graph plumbing -------------------------------------------------------

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse sweep from a scalar loss, populating leaf gradients."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar tensor, got shape {self.data.shape}"
            )
        self.grad = np.ones_like(self.data)
        for node in reversed(_toposort(self)):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- elementwise ops ------------------------------------------------------

    def __add__(self, other):
        if not isinstance(other, Tensor):
            out = make_op(self.data + _scalar(other, self.dtype), (self,), "add_scalar")
            if out._tracked():
                def backward():
                    self._accumulate(out.grad)
                out._backward = backward
            return out
        if self.data.shape != other.data.shape:
            raise ValueError(f"add: shape mismatch {self.shape} vs {other.shape}")
        out = make_op(self.data + other.data, (self, other), "add")
        if out._tracked():
            def backward():
                if self.requires_grad:
                    self._accumulate(out.grad)
                if other.requires_grad:
                    other._accumulate(out.grad)
            out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = make_op(-self.data, (self,), "neg")
        if out._tracked():
            def backward():
                self._accumulate(-out.grad)
            out._backward = backward
        return out

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return self + (-other)
        return self + (-_scalar(other, self.dtype))

    def __mul__(self, other):
        if not isinstance(other, Tensor):
            c = _scalar(other, self.dtype)
            out = make_op(self.data * c, (self,), "mul_scalar")
            if out._tracked():
                def backward():
                    self._accumulate(out.grad * c)
                out._backward = backward
            return out
        if self.data.shape != other.data.shape:
            raise ValueError(f"mul: shape mismatch {self.shape} vs {other.shape}")
        out = make_op(self.data * other.data, (self, other), "mul")
        if out._tracked():
            def backward():
                if self.requires_grad:
                    self._accumulate(out.grad * other.data)
                if other.requires_grad:
                    other._accumulate(out.grad * self.data)
            out._backward = backward
        return out

    __rmul__ = __mul__

    def sum(self):
        out = make_op(np.asarray(self.data.sum(dtype=self.dtype)), (self,), "sum")
        if out._tracked():
            def backward():
                self._accumulate(np.broadcast_to(out.grad, self.data.shape))
            out._backward = backward
        return out

    def mean(self):
        return self.sum() * (1.0 / self.data.size)

    def relu(self):
        out = make_op(np.maximum(self.data, 0), (self,), "relu")
        if out._tracked():
            def backward():
                self._accumulate(out.grad * (self.data > 0))
            out._backward = backward
        return out

    def leaky_relu(self, alpha=0.01):
        out = make_op(np.where(self.data > 0, self.data, self.data * alpha), (self,), "leaky_relu")
        if out._tracked():
            def backward():
                self._accumulate(out.grad * np.where(self.data > 0, 1.0, alpha).astype(self.dtype))
            out._backward = backward
        return out

    def sigmoid(self):
        out = make_op(_sigmoid(self.data), (self,), "sigmoid")
        if out._tracked():
            def backward():
                self._accumulate(out.grad * out.data * (1.0 - out.data))
            out._backward = backward
        return out

    def __getitem__(self, key):
        out = make_op(self.data[key].copy(), (self,), "slice")
        if out._tracked():
            def backward():
                g = np.zeros_like(self.data)
                g[key] += out.grad
                self._accumulate(g)
            out._backward = backward
        return out

    def reshape(self, shape):
        out = make_op(self.data.reshape(shape).copy(), (self,), "reshape")
        if out._tracked():
            def backward():
                self._accumulate(out.grad.reshape(self.data.shape))
            out._backward = backward
        return out

    def _tracked(self):
        """Whether gradients should flow through this op result."""
        return self.requires_grad and not Tensor.no_grad_mode


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        self._saved = Tensor.no_grad_mode
        Tensor.no_grad_mode = True
        return self

    def __exit__(self, *exc):
        Tensor.no_grad_mode = self._saved
        return False


def make_op(data, parents, op):
    """Create an op-result tensor; gradient tracking follows the parents."""
    tracked = not Tensor.no_grad_mode and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=tracked, parents=parents if tracked else (), op=op)


def _toposort(root):
    """Iterative DFS post-order over the parent DAG."""
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


def _scalar(value, dtype):
    # python floats interact weakly with float32 arrays under NEP 50;
    # numpy float64 scalars would silently promote, so keep them native
    return float(value)


def _sigmoid(x):
    # split by sign to avoid overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out
