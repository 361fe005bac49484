"""Dense float64 tensors recorded on a tape for reverse-mode differentiation.

A :class:`Graph` is a plain append-only tape: node insertion order is a
topological order of the computation, and the backward pass walks the tape
once in reverse. Recording is scoped with ``with Graph():`` and is
thread-local, so independent runs may record in parallel threads without
sharing state.
"""

from __future__ import annotations

import threading

import numpy as np

from ..errors import ArgumentError, NumericError, StateError

# When enabled, every op asserts its forward output is finite. Costs one
# pass over the data per op; meant for tests and debugging.
DEBUG_CHECK_FINITE = False

_tls = threading.local()


def _stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_graph() -> "Graph | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array, optionally tracked on the active graph.

    ``grad`` is populated for leaves with ``requires_grad`` by
    :func:`backward`; repeated backward calls accumulate into it.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ArgumentError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def is_tracked(self) -> bool:
        return self.node_id is not None or self.requires_grad

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.node_id is not None:
            flags.append(f"node={self.node_id}")
        tail = ", ".join([""] + flags) if flags else ""
        return f"Tensor(shape={self.shape}{tail})"

    # Arithmetic sugar; the functional forms live in tensorcore.ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __neg__(self):
        from . import ops

        return ops.neg(self)


def as_tensor(value) -> Tensor:
    """Wrap arrays and scalars as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


class _Node:
    """One recorded operation: op kind, input ids, and its backward rule."""

    __slots__ = ("op", "inputs", "input_ids", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], backward_fn):
        self.op = op
        self.inputs = inputs
        self.input_ids = tuple(t.node_id for t in inputs)
        self.backward_fn = backward_fn


class Graph:
    """Append-only tape of recorded operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.recording = False

    def __enter__(self) -> "Graph":
        _stack().append(self)
        self.recording = True
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.recording = False
        popped = _stack().pop()
        if popped is not self:  # pragma: no cover - indicates misuse
            raise StateError("graph context exited out of order")


def record(op: str, inputs: tuple[Tensor, ...], out: Tensor, backward_fn) -> Tensor:
    """Register ``out`` on the active tape if any input is tracked."""
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    graph = active_graph()
    if graph is not None and graph.recording and any(t.is_tracked() for t in inputs):
        out.node_id = len(graph.nodes)
        graph.nodes.append(_Node(op, inputs, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable leaf with dLoss/dLeaf.

    Visits tape nodes exactly once, in reverse insertion order. Calling
    backward again without clearing leaf grads accumulates contributions.
    """
    graph = active_graph()
    if graph is None or not graph.recording:
        raise StateError("backward requires an active recording graph")
    if not isinstance(loss, Tensor) or loss.node_id is None:
        raise StateError("loss is not recorded on the active graph")
    if loss.data.size != 1:
        raise ArgumentError(f"loss must be scalar, got shape {loss.shape}")

    buffers: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node_id in range(loss.node_id, -1, -1):
        upstream = buffers.pop(node_id, None)
        if upstream is None:
            continue
        node = graph.nodes[node_id]
        grads = node.backward_fn(upstream)
        for tensor, grad in zip(node.inputs, grads):
            if grad is None:
                continue
            if tensor.node_id is not None:
                held = buffers.get(tensor.node_id)
                buffers[tensor.node_id] = grad if held is None else held + grad
            elif tensor.requires_grad:
                tensor.grad = np.array(grad) if tensor.grad is None else tensor.grad + grad
