"""Minimal dense-tensor library with reverse-mode differentiation."""

from . import ops
from .optim import AdamState, adam_step, collect_grads, init_adam, zero_grads
from .tensor import Graph, Tensor, active_graph, as_tensor, backward

__all__ = [
    "ops",
    "Tensor",
    "Graph",
    "backward",
    "as_tensor",
    "active_graph",
    "AdamState",
    "adam_step",
    "init_adam",
    "collect_grads",
    "zero_grads",
]
