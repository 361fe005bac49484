"""Shared test utilities: finite-difference gradient checks."""

from __future__ import annotations

import numpy as np

from protoanchor.tensorcore import Graph, Tensor, backward

FD_STEP = 1e-5


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    """Relative error with an absolute fallback for near-zero pairs.

    Below ``floor`` the FD estimate is dominated by float64 cancellation
    noise, so tiny gradients are compared absolutely (scaled back onto the
    same threshold).
    """
    scale = max(abs(a), abs(b))
    if scale < floor:
        return abs(a - b) / floor * 1e-4
    return abs(a - b) / scale


def fd_grad_check(
    build_loss,
    arrays: list[np.ndarray],
    step: float = FD_STEP,
    coords_per_array: int | None = None,
    seed: int = 0,
) -> float:
    """Compare tape gradients of ``build_loss(tensors) -> scalar Tensor`` to
    central finite differences.

    Returns the max relative error over the checked coordinates. When
    ``coords_per_array`` is given, a seeded random subset of coordinates is
    checked per array (all coordinates otherwise).
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Graph():
        loss = build_loss(tensors)
        backward(loss)
    analytic = [np.zeros_like(a) if t.grad is None else t.grad.copy() for a, t in zip(arrays, tensors)]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for ai, base in enumerate(arrays):
        flat = base.reshape(-1)
        n = flat.size
        if coords_per_array is None or coords_per_array >= n:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=coords_per_array, replace=False)
        for c in coords:
            orig = flat[c]

            def eval_at(value: float) -> float:
                flat[c] = value
                probe = [Tensor(a.copy()) for a in arrays]
                return build_loss(probe).item()

            f_plus = eval_at(orig + step)
            f_minus = eval_at(orig - step)
            flat[c] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, rel_err(analytic[ai].reshape(-1)[c], fd))
    return worst
