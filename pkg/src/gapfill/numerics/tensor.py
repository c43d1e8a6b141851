"""Dense tensors with reverse-mode automatic differentiation.

Define-by-run: every operation on `Tensor` records its inputs and a backward
closure, so each forward pass rebuilds the graph from scratch.  `backward()`
walks the recorded graph once, in reverse topological order, and refuses to
run twice on the same recording.

Gradients only exist on nodes that require them; plain data wrapped in a
Tensor stays untouched by backward passes.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, GraphReuseError, NumericError

# When True, every op validates its output for NaN/Inf.  Off by default for
# speed; the training loop re-checks loss and parameters at step granularity.
_STRICT = False


def set_strict(flag: bool) -> None:
    """Toggle per-operation NaN/Inf validation (used by verification suites)."""
    global _STRICT
    _STRICT = bool(flag)


def strict_enabled() -> bool:
    return _STRICT


class Tensor:
    """A numpy array plus optional gradient buffer and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        """A graph-free view of the same values."""
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def parameter(data, name=None, dtype=None) -> Tensor:
    """Wrap an array as a trainable leaf."""
    arr = np.array(data, dtype=dtype if dtype is not None else None)
    return Tensor(arr, requires_grad=True, name=name)


def constant(data, dtype=None) -> Tensor:
    """Wrap an array as non-trainable graph input."""
    if isinstance(data, Tensor):
        return data
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr)


def toposort(root: Tensor) -> list:
    """Iterative post-order over the recorded graph (deepest inputs first)."""
    order = []
    seen = set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Fill gradient buffers of every trainable leaf reachable from `loss`.

    `loss` must be scalar, finite, and come from a forward pass that has not
    been backpropagated yet.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() requires a scalar loss, got shape {loss.data.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("backward() on a non-finite loss")
    order = toposort(loss)
    for node in order:
        if node._consumed and node._parents:
            raise GraphReuseError("backward() called twice on the same forward pass")

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        node._consumed = True
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # Drop the closure so intermediate buffers can be reclaimed and a
            # second traversal cannot silently half-run.
            node._backward = None
        if node._parents:
            node.grad = None
