"""Dense float tensors with reverse-mode automatic differentiation.

The graph is built eagerly: each operation returns a new ``Tensor`` that
remembers its inputs and a closure routing gradients back to them.
``backward`` walks the graph once in reverse topological order, so a node's
gradient is fully accumulated before its own closure runs.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, StateError

__all__ = ["Tensor", "no_grad", "grad_enabled", "accumulate_grad", "make_node"]

_GRAD_ENABLED = True


class no_grad:
    """Disable graph construction inside a ``with`` block (evaluation passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def accumulate_grad(t: "Tensor", g) -> None:
    """Add ``g`` into ``t.grad``, allocating the buffer on first use."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def make_node(data, parents=(), backward_fn=None, force_grad=False) -> "Tensor":
    """Wrap ``data`` in a graph node when gradients are recorded.

    The closure is dropped entirely when no parent needs gradients (or when
    inside ``no_grad``), which keeps evaluation passes free of graph state.
    """
    if _GRAD_ENABLED and (force_grad or any(p.requires_grad for p in parents)):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


class Tensor:
    """A dense array plus an optional same-shape gradient buffer.

    Leaf parameters are created with :meth:`param`, which preallocates the
    gradient so unreachable parameters read back an exact zero gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self._consumed = False

    @staticmethod
    def param(data, name=None, dtype=np.float32) -> "Tensor":
        t = Tensor(np.ascontiguousarray(data, dtype=dtype), requires_grad=True, name=name)
        t.grad = np.zeros_like(t.data)
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def grad_array(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- scalar/elementwise arithmetic (used by the cost-model graphs) --------

    def __add__(self, other):
        if isinstance(other, Tensor):
            if other.data.shape != self.data.shape:
                raise DimensionError(
                    f"add: shapes {self.data.shape} and {other.data.shape} differ"
                )
            a, b = self, other

            def bw(g):
                if a.requires_grad:
                    accumulate_grad(a, g)
                if b.requires_grad:
                    accumulate_grad(b, g)

            return make_node(a.data + b.data, (a, b), bw)
        a = self

        def bw(g):
            if a.requires_grad:
                accumulate_grad(a, g)

        return make_node(a.data + other, (a,), bw)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if other.data.shape != self.data.shape:
                raise DimensionError(
                    f"mul: shapes {self.data.shape} and {other.data.shape} differ"
                )
            a, b = self, other

            def bw(g):
                if a.requires_grad:
                    accumulate_grad(a, g * b.data)
                if b.requires_grad:
                    accumulate_grad(b, g * a.data)

            return make_node(a.data * b.data, (a, b), bw)
        a = self

        def bw(g):
            if a.requires_grad:
                accumulate_grad(a, g * other)

        return make_node(a.data * other, (a,), bw)

    __rmul__ = __mul__

    def astype(self, dtype) -> "Tensor":
        a = self

        def bw(g):
            if a.requires_grad:
                accumulate_grad(a, g.astype(a.data.dtype))

        return make_node(a.data.astype(dtype), (a,), bw)

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return (-self) + other

    # -- reverse pass ----------------------------------------------------------

    def backward(self) -> None:
        """Propagate gradients from this scalar to every reachable parameter.

        Raises :class:`StateError` when invoked twice on the same node without
        rebuilding the graph.
        """
        if self.data.size != 1:
            raise DimensionError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._consumed:
            raise StateError("backward was already called on this graph; rebuild the forward pass first")
        self._consumed = True

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
