"""Differentiable operations on :class:`~protoanchor.tensorcore.tensor.Tensor`.

Exactly the primitives the network and the losses need. Elementwise ops
broadcast only between identical shapes or tensor-vs-scalar; everything
that needs an axis-wise broadcast (normalization, log-sum-exp, entropy,
pairwise distances) is a fused op with a handwritten backward rule, each
validated against central finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ArgumentError, DimensionError, DomainError
from .tensor import Tensor, as_tensor, record

__all__ = [
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "relu",
    "exp",
    "log",
    "sqrt",
    "sum_over_axis",
    "mean_over_axis",
    "sum_all",
    "mean_all",
    "global_average_pool",
    "logsumexp",
    "softmax_entropy",
    "reshape",
    "pad_last",
    "slice_last",
    "concat0",
    "gather0",
    "take_per_row",
    "class_means",
    "add_channel_bias",
    "channel_norm",
    "conv1d",
    "conv2d",
    "sq_euclidean",
    "pairwise_sq_dists",
]


def _binary_mode(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "b_scalar"
    if a.ndim == 0:
        return "a_scalar"
    raise DimensionError(
        f"elementwise ops broadcast only identical shapes or tensor-vs-scalar, got {a.shape} and {b.shape}"
    )


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=np.float64).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_mode(a, b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return record("add", (a, b), out, bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_mode(a, b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return record("sub", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_mode(a, b)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)

    def bwd(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return record("mul", (a, b), out, bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return record("neg", (a,), out, lambda g: (-g,))


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    out = Tensor(a.data * s)
    return record("scale", (a,), out, lambda g: (g * s,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    out = Tensor(np.where(mask, a.data, 0.0))
    return record("relu", (a,), out, lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    value = np.exp(a.data)
    out = Tensor(value)
    return record("exp", (a,), out, lambda g: (g * value,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive entries")
    data = a.data
    out = Tensor(np.log(data))
    return record("log", (a,), out, lambda g: (g / data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt requires non-negative entries")
    value = np.sqrt(a.data)
    # Derivative clamped near zero; callers keep inputs away from exact 0.
    safe = np.maximum(value, 1e-150)
    out = Tensor(value)
    return record("sqrt", (a,), out, lambda g: (g * 0.5 / safe,))


def _check_axis(a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ArgumentError(f"axis {axis} out of range for shape {a.shape}")
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise ArgumentError(f"cannot reduce over empty axis {axis} of shape {a.shape}")
    return axis


def sum_over_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    out = Tensor(a.data.sum(axis=axis))

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return record("sum_over_axis", (a,), out, bwd)


def mean_over_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    n = a.shape[axis]
    out = Tensor(a.data.mean(axis=axis))

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy(),)

    return record("mean_over_axis", (a,), out, bwd)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum())
    return record("sum_all", (a,), out, lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    out = Tensor(a.data.mean())
    return record("mean_all", (a,), out, lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def global_average_pool(a) -> Tensor:
    """[B, C, L] -> [B, C], the mean over the time axis."""
    a = as_tensor(a)
    if a.ndim != 3:
        raise DimensionError(f"global_average_pool expects [B, C, L], got {a.shape}")
    return mean_over_axis(a, 2)


def logsumexp(a, axis: int = -1) -> Tensor:
    """Max-shifted log(sum(exp(a))) along ``axis`` (numerically stable)."""
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    m = a.data.max(axis=axis, keepdims=True)
    z = np.exp(a.data - m)
    s = z.sum(axis=axis, keepdims=True)
    softmax = z / s
    out = Tensor(np.squeeze(m + np.log(s), axis=axis))

    def bwd(g):
        return (np.expand_dims(g, axis) * softmax,)

    return record("logsumexp", (a,), out, bwd)


def softmax_entropy(a, axis: int = -1) -> Tensor:
    """Shannon entropy of softmax(a) along ``axis``; output drops that axis.

    dH/da_k = -p_k (log p_k + H), with p = softmax(a).
    """
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    logp = shifted - lse
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=axis)
    out = Tensor(ent)

    def bwd(g):
        h = np.expand_dims(ent, axis)
        return (np.expand_dims(g, axis) * (-p * (logp + h)),)

    return record("softmax_entropy", (a,), out, bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    in_shape = a.shape
    out = Tensor(a.data.reshape(shape))
    return record("reshape", (a,), out, lambda g: (g.reshape(in_shape),))


def pad_last(a, n: int) -> Tensor:
    """Zero-pad the last axis by ``n`` trailing entries."""
    a = as_tensor(a)
    n = int(n)
    if n < 0:
        raise ArgumentError("pad length must be non-negative")
    if n == 0:
        padded = a.data
    else:
        padded = np.zeros(a.shape[:-1] + (a.shape[-1] + n,))
        padded[..., : a.shape[-1]] = a.data
    length = a.shape[-1]
    out = Tensor(padded)
    return record("pad_last", (a,), out, lambda g: (g[..., :length].copy(),))


def slice_last(a, length: int) -> Tensor:
    """Keep the first ``length`` entries of the last axis."""
    a = as_tensor(a)
    length = int(length)
    if not 0 < length <= a.shape[-1]:
        raise DimensionError(f"slice length {length} invalid for shape {a.shape}")
    total = a.shape[-1]
    out = Tensor(a.data[..., :length])

    def bwd(g):
        z = np.zeros(a.shape)
        z[..., :length] = g
        return (z,)

    return record("slice_last", (a,), out, bwd)


def concat0(tensors) -> Tensor:
    """Concatenate along axis 0."""
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ArgumentError("concat0 needs at least one tensor")
    trailing = {t.shape[1:] for t in tensors}
    if len(trailing) != 1:
        raise DimensionError(f"concat0 requires identical trailing dims, got {sorted(trailing)}")
    sizes = [t.shape[0] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0))

    def bwd(g):
        pieces = []
        start = 0
        for n in sizes:
            pieces.append(g[start : start + n].copy())
            start += n
        return tuple(pieces)

    return record("concat0", tensors, out, bwd)


def gather0(a, indices) -> Tensor:
    """Select rows along axis 0; duplicate indices sum their gradients."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ArgumentError("gather0 indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ArgumentError("gather0 index out of range")
    out = Tensor(a.data[idx])

    def bwd(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return record("gather0", (a,), out, bwd)


def take_per_row(a, cols) -> Tensor:
    """out[m] = a[m, cols[m]] for a 2-D tensor."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"take_per_row expects a 2-D tensor, got {a.shape}")
    cols = np.asarray(cols, dtype=np.intp)
    m, n = a.shape
    if cols.shape != (m,):
        raise DimensionError(f"need one column index per row, got {cols.shape} for {a.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= n):
        raise ArgumentError("column index out of range")
    rows = np.arange(m)
    out = Tensor(a.data[rows, cols])

    def bwd(g):
        z = np.zeros_like(a.data)
        z[rows, cols] = g
        return (z,)

    return record("take_per_row", (a,), out, bwd)


def class_means(a, labels, n_classes: int) -> Tensor:
    """Per-class mean of rows: [B, w] with labels in 0..n_classes-1 -> [n_classes, w]."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"class_means expects [B, w], got {a.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (a.shape[0],):
        raise DimensionError("labels must match the number of rows")
    counts = np.bincount(labels, minlength=n_classes)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ArgumentError("label out of range")
    if np.any(counts == 0):
        missing = np.nonzero(counts == 0)[0].tolist()
        raise ArgumentError(f"classes {missing} have no samples")
    sums = np.zeros((n_classes, a.shape[1]))
    np.add.at(sums, labels, a.data)
    out = Tensor(sums / counts[:, None])

    def bwd(g):
        return ((g / counts[:, None])[labels],)

    return record("class_means", (a,), out, bwd)


def add_channel_bias(x, b) -> Tensor:
    """x[B, C, ...] + b[C] broadcast over batch and spatial axes."""
    x, b = as_tensor(x), as_tensor(b)
    if x.ndim < 2 or b.ndim != 1 or b.shape[0] != x.shape[1]:
        raise DimensionError(f"bias {b.shape} does not match channels of {x.shape}")
    bshape = (1, b.shape[0]) + (1,) * (x.ndim - 2)
    out = Tensor(x.data + b.data.reshape(bshape))
    sum_axes = (0,) + tuple(range(2, x.ndim))

    def bwd(g):
        return g, g.sum(axis=sum_axes)

    return record("add_channel_bias", (x, b), out, bwd)


def channel_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes.

    For x[B, C, *S]: y = gamma * (x - mean) / (std + eps) + beta, with
    mean/std taken over S independently for every (b, c). Independent of
    batch composition by construction.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 3:
        raise DimensionError(f"channel_norm expects [B, C, spatial...], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("gamma/beta must be 1-D with one entry per channel")
    axes = tuple(range(2, x.ndim))
    n = int(np.prod(x.shape[2:]))
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    std = np.sqrt(var)
    denom = std + eps
    xhat = (x.data - mu) / denom
    cshape = (1, c) + (1,) * (x.ndim - 2)
    gamma_b = gamma.data.reshape(cshape)
    out = Tensor(gamma_b * xhat + beta.data.reshape(cshape))
    affine_axes = (0,) + axes

    def bwd(g):
        g_xhat = g * gamma_b
        mean_g = g_xhat.mean(axis=axes, keepdims=True)
        mean_gx = (g_xhat * xhat).mean(axis=axes, keepdims=True)
        # Third term vanishes identically when std == 0 (xhat == 0 then).
        std_safe = np.where(std > 0.0, std, 1.0)
        dx = (g_xhat - mean_g) / denom - xhat * mean_gx / std_safe
        dgamma = (g * xhat).sum(axis=affine_axes)
        dbeta = g.sum(axis=affine_axes)
        return dx, dgamma, dbeta

    del n
    return record("channel_norm", (x, gamma, beta), out, bwd)


def _same_pad_1d(length: int, k: int, stride: int) -> tuple[int, int, int]:
    out_len = -(-length // stride)  # ceil
    total = max((out_len - 1) * stride + k - length, 0)
    left = total // 2
    return out_len, left, total - left


def _zpad1d(x: np.ndarray, left: int, right: int) -> np.ndarray:
    if left == 0 and right == 0:
        return x
    out = np.zeros(x.shape[:-1] + (x.shape[-1] + left + right,))
    out[..., left : left + x.shape[-1]] = x
    return out


def _corr1d(xp: np.ndarray, kflat: np.ndarray, k: int, stride: int, out_len: int) -> np.ndarray:
    """Valid cross-correlation of padded xp[B,C,Lp] with kflat[O, C*k] via matmul."""
    w = sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :out_len]  # [B,C,out,k]
    wt = np.ascontiguousarray(w.transpose(0, 2, 1, 3)).reshape(xp.shape[0], out_len, -1)
    return np.matmul(wt, kflat.T).transpose(0, 2, 1)  # [B,O,out]


def conv1d(x, kernel, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation along the time axis.

    x[B, C, L] with kernel[O, C, k]; "same" keeps ceil(L/stride) outputs
    (odd k required), "valid" keeps fully-overlapping windows only.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 3:
        raise DimensionError(f"conv1d expects x[B,C,L] and kernel[O,C,k], got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"channel mismatch: input has {x.shape[1]}, kernel expects {kernel.shape[1]}")
    stride = int(stride)
    if stride < 1:
        raise ArgumentError(f"stride must be >= 1, got {stride}")
    k = kernel.shape[2]
    length = x.shape[2]
    if padding == "same":
        if k % 2 == 0:
            raise ArgumentError("same-padding requires an odd kernel size")
        out_len, left, right = _same_pad_1d(length, k, stride)
        xp = _zpad1d(x.data, left, right)
    elif padding == "valid":
        if length < k:
            raise DimensionError(f"input length {length} shorter than kernel {k}")
        out_len, left = (length - k) // stride + 1, 0
        xp = x.data
    else:
        raise ArgumentError(f"unknown padding mode '{padding}'")

    kd = kernel.data
    o, c = kd.shape[0], kd.shape[1]
    lp = xp.shape[2]

    if k == 1:
        # Pointwise kernel: a strided channel matmul, no windowing needed.
        xs = np.ascontiguousarray(xp[:, :, ::stride][:, :, :out_len])
        kmat = kd[:, :, 0]
        out = Tensor(np.matmul(kmat, xs))

        def bwd(g):
            dk = np.einsum("bol,bcl->oc", g, xs, optimize=True)[:, :, None]
            dxs = np.matmul(kmat.T, g)
            if stride == 1 and left == 0 and lp == length:
                return dxs, dk
            dxp = np.zeros((g.shape[0], c, lp))
            dxp[:, :, ::stride][:, :, :out_len] = dxs
            dx = dxp[:, :, left : left + length] if padding == "same" else dxp
            return np.ascontiguousarray(dx), dk

        return record("conv1d", (x, kernel), out, bwd)

    windows = sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :out_len]
    wt = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(xp.shape[0], out_len, c * k)
    out = Tensor(np.matmul(wt, kd.reshape(o, c * k).T).transpose(0, 2, 1))

    def bwd(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(-1, o)
        dk = (gt.T @ wt.reshape(-1, c * k)).reshape(o, c, k)
        # dxp = full correlation of the stride-dilated g with the flipped,
        # in/out-swapped kernel.
        if stride == 1:
            gd = g
        else:
            gd = np.zeros((g.shape[0], o, (out_len - 1) * stride + 1))
            gd[:, :, ::stride] = g
        gp = _zpad1d(gd, k - 1, k - 1)
        kf = np.ascontiguousarray(kd[:, :, ::-1].transpose(1, 0, 2)).reshape(c, o * k)
        core = _corr1d(gp, kf, k, 1, gd.shape[2] + k - 1)  # [B, C, (out-1)*stride + k]
        if core.shape[2] == lp:
            dxp = core
        else:
            dxp = np.zeros((g.shape[0], c, lp))
            dxp[:, :, : core.shape[2]] = core
        dx = dxp[:, :, left : left + length] if padding == "same" else dxp
        return np.ascontiguousarray(dx), dk

    return record("conv1d", (x, kernel), out, bwd)


def _zpad2d(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    out = np.zeros(x.shape[:-2] + (x.shape[-2] + 2 * ph, x.shape[-1] + 2 * pw))
    out[..., ph : ph + x.shape[-2], pw : pw + x.shape[-1]] = x
    return out


def _corr2d(xp: np.ndarray, kflat: np.ndarray, kh: int, kw: int, oh: int, ow: int) -> np.ndarray:
    """Valid 2-D cross-correlation of xp[B,C,Hp,Wp] with kflat[O, C*kh*kw]."""
    w = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # [B,C,oh,ow,kh,kw]
    wt = np.ascontiguousarray(w.transpose(0, 2, 3, 1, 4, 5)).reshape(xp.shape[0], oh * ow, -1)
    out = np.matmul(wt, kflat.T)  # [B, oh*ow, O]
    return out.transpose(0, 2, 1).reshape(xp.shape[0], kflat.shape[0], oh, ow)


def conv2d(x, kernel, padding: str = "same") -> Tensor:
    """Same-padded 2-D cross-correlation, stride 1.

    x[B, C, H, W] with kernel[O, C, kh, kw]; kh and kw must be odd, and the
    output spatial dims equal the input's.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects x[B,C,H,W] and kernel[O,C,kh,kw], got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"channel mismatch: input has {x.shape[1]}, kernel expects {kernel.shape[1]}")
    if padding != "same":
        raise ArgumentError("conv2d supports same-padding only")
    kh, kw = kernel.shape[2], kernel.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ArgumentError("same-padding requires odd kernel dims")
    h, w = x.shape[2], x.shape[3]
    kd = kernel.data
    o, c = kd.shape[0], kd.shape[1]

    if kh == 1 and kw == 1:
        x2 = x.data.reshape(x.shape[0], c, h * w)
        kmat = kd[:, :, 0, 0]
        out = Tensor(np.matmul(kmat, x2).reshape(x.shape[0], o, h, w))

        def bwd(g):
            g2 = g.reshape(g.shape[0], o, h * w)
            dk = np.einsum("bon,bcn->oc", g2, x2, optimize=True)[:, :, None, None]
            dx = np.matmul(kmat.T, g2).reshape(x.shape)
            return dx, dk

        return record("conv2d", (x, kernel), out, bwd)

    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = _zpad2d(x.data, ph, pw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    wt = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(x.shape[0], h * w, c * kh * kw)
    out = Tensor(np.matmul(wt, kd.reshape(o, -1).T).transpose(0, 2, 1).reshape(x.shape[0], o, h, w))

    def bwd(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        dk = (gt.T @ wt.reshape(-1, c * kh * kw)).reshape(o, c, kh, kw)
        gp = _zpad2d(g, kh - 1, kw - 1)
        kf = np.ascontiguousarray(kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, -1)
        dxp = _corr2d(gp, kf, kh, kw, h + 2 * ph, w + 2 * pw)
        return np.ascontiguousarray(dxp[:, :, ph : ph + h, pw : pw + w]), dk

    return record("conv2d", (x, kernel), out, bwd)


def sq_euclidean(a, b) -> Tensor:
    """Squared Euclidean distance between two equal-length vectors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"sq_euclidean expects equal-length vectors, got {a.shape}, {b.shape}")
    diff = a.data - b.data
    out = Tensor(np.dot(diff, diff))

    def bwd(g):
        ga = 2.0 * g * diff
        return ga, -ga

    return record("sq_euclidean", (a, b), out, bwd)


def pairwise_sq_dists(x, p) -> Tensor:
    """All squared distances between rows of x[M, w] and rows of p[N, w]."""
    x, p = as_tensor(x), as_tensor(p)
    if x.ndim != 2 or p.ndim != 2 or x.shape[1] != p.shape[1]:
        raise DimensionError(f"pairwise_sq_dists expects [M,w] and [N,w], got {x.shape}, {p.shape}")
    diff = x.data[:, None, :] - p.data[None, :, :]
    out = Tensor(np.einsum("mnw,mnw->mn", diff, diff, optimize=True))

    def bwd(g):
        weighted = 2.0 * g[:, :, None] * diff
        return weighted.sum(axis=1), -weighted.sum(axis=0)

    return record("pairwise_sq_dists", (x, p), out, bwd)
