"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is a tape: while a Graph is active, every primitive records an
entry holding its input/output tensors and a backward closure.  backward()
walks the tape once in reverse execution order, accumulating gradients in a
fixed order so that a seeded run is bit-reproducible.  When no graph is
active (inference), recording is skipped entirely and the ops behave as
plain numpy functions.
"""
from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "Graph", "active_graph", "record", "needs_grad", "backward"]


class Tensor:
    """A dense float64 array plus an optional gradient slot.

    The data array is treated as immutable by every op; only the optimizer
    rewrites parameter storage, and only between forward passes.
    """

    __slots__ = ("data", "requires_grad", "grad", "_produced")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._produced = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"


_GRAPH_STACK: list["Graph"] = []


class Graph:
    """Tape of recorded operations in execution order.

    Execution order is a topological order by construction: an op can only
    consume tensors that already exist when it runs.  A Graph instance
    belongs to a single thread.
    """

    def __init__(self):
        # each entry: (inputs tuple, output Tensor, backward closure)
        self.ops: list[tuple] = []

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _GRAPH_STACK.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise RuntimeError("graph context stack corrupted")
        return False


def active_graph() -> Graph | None:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def needs_grad(t: Tensor) -> bool:
    """True when a gradient must flow into this tensor during backward."""
    return t.requires_grad or t._produced


def record(inputs, output: Tensor, backward_fn) -> Tensor:
    """Register an op on the active graph, if any.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    input, in input order.  Recording is skipped when no graph is active or
    when no input can receive a gradient, which keeps pure inference free of
    tape bookkeeping.
    """
    graph = active_graph()
    if graph is not None and any(needs_grad(t) for t in inputs):
        output._produced = True
        graph.ops.append((tuple(inputs), output, backward_fn))
    return output


def backward(graph: Graph, loss: Tensor, params=None) -> None:
    """Populate .grad with dLoss/dTensor for every tensor in the graph.

    Visits each recorded op exactly once, in reverse execution order.
    Parameters recorded on the tape but not on any path to the loss end up
    with zero gradients; requires_grad=False leaves never accumulate.  The
    optional params sequence registers tensors that must carry a gradient
    afterwards even if the recorded computation never touched them.
    """
    if loss.size != 1:
        raise ValueError(
            f"backward needs a scalar loss, got shape {tuple(loss.shape)}"
        )
    seen: set[int] = set()
    tensors: list[Tensor] = []
    for inputs, out, _ in graph.ops:
        for t in inputs + (out,):
            if id(t) not in seen:
                seen.add(id(t))
                tensors.append(t)
    for t in params or ():
        if id(t) not in seen:
            seen.add(id(t))
            tensors.append(t)
    for t in tensors:
        t.grad = None
    loss.grad = np.ones_like(loss.data)
    for inputs, out, backward_fn in reversed(graph.ops):
        gout = out.grad
        if gout is None:
            continue  # this op does not feed the loss
        grads = backward_fn(gout)
        for t, g in zip(inputs, grads):
            if g is None or not needs_grad(t):
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
    # non-participating parameters still get a (zero) gradient
    for t in tensors:
        if t.requires_grad and t.grad is None:
            t.grad = np.zeros_like(t.data)
