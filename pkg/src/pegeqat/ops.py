"""Differentiable operations on :class:`~pegeqat.tensor.Tensor`.

Shapes follow NCHW for images and (N, features) for dense layers. There is
no general broadcasting: elementwise ops need equal shapes, and
:func:`bias_add` is the only op that broadcasts (over the channel axis).
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import DimensionError
from .tensor import Tensor


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _same_shape(a: Tensor, b: Tensor, tag: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{tag}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a)
    _same_shape(a, b, "add")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor.from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape, dt = a.shape, a.dtype
    return Tensor.from_op(np.asarray(a.data.sum(), dtype=dt), (a,), lambda g: (np.full(shape, g, dtype=dt),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, dt, n = a.shape, a.dtype, a.size
    return Tensor.from_op(
        np.asarray(a.data.mean(), dtype=dt), (a,), lambda g: (np.full(shape, g / n, dtype=dt),), "mean"
    )


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with gradients ``g @ b.T`` and ``a.T @ g``."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return Tensor.from_op(ad @ bd, (a, b), backward, "matmul")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias ``b`` (C,) to ``x`` shaped (N, C) or (N, C, H, W)."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"bias of shape {b.shape} does not match channel axis of {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return Tensor.from_op(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=axes)), "bias_add")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    xd, wd = x.data, w.data

    def backward(g):
        return (g @ wd if x.requires_grad else None, g.T @ xd if w.requires_grad else None)

    out = Tensor.from_op(xd @ wd.T, (x, w), backward, "linear")
    return bias_add(out, b) if b is not None else out


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation of (N, C, H, W) with (F, C, Kh, Kw).

    Output extents are floored: ``(H + 2*pad - Kh) // stride + 1``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D operands, got {x.shape} and {w.shape}")
    n, c, h, wd_ = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise DimensionError(f"conv2d channel mismatch: input {c}, kernel {cw}")
    if stride < 1:
        raise DimensionError("conv2d stride must be >= 1")
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(wd_, kw, stride, pad)
    if ho < 1 or wo < 1 or kh > h + 2 * pad or kw > wd_ + 2 * pad:
        raise DimensionError(f"conv2d output extent non-positive for input {x.shape}, kernel {w.shape}")
    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = kernels.col2im(gmat @ wmat, n, c, h, wd_, kh, kw, stride, pad)
        return gx, gw

    return Tensor.from_op(np.ascontiguousarray(out), (x, w), backward, "conv2d")


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling (trailing rows/cols are dropped).

    Ties route the gradient to the first maximal element in row-major order.
    """
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho < 1 or wo < 1:
        raise DimensionError(f"maxpool2d: input {x.shape} smaller than window {k}")
    xd = x.data[:, :, : ho * k, : wo * k]
    win = xd.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, : ho * k, : wo * k] = gw.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        return (gx,)

    return Tensor.from_op(out, (x,), backward, "maxpool2d")


def global_avgpool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    inv = x.dtype.type(1.0 / (h * w))
    return Tensor.from_op(
        x.data.mean(axis=(2, 3)).astype(x.dtype),
        (x,),
        lambda g: (np.broadcast_to((g * inv)[:, :, None, None], x.shape).copy(),),
        "global_avgpool",
    )


def channel_shortcut(x: Tensor, out_channels: int, stride: int) -> Tensor:
    """Parameter-free residual shortcut: spatial subsampling by ``stride`` and
    symmetric zero-padding of the channel axis up to ``out_channels``."""
    n, c, h, w = x.shape
    extra = out_channels - c
    if extra < 0:
        raise DimensionError("channel_shortcut cannot reduce channels")
    lo = extra // 2
    sub = x.data[:, :, ::stride, ::stride]
    out = np.zeros((n, out_channels) + sub.shape[2:], dtype=x.dtype)
    out[:, lo : lo + c] = sub

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, ::stride, ::stride] = g[:, lo : lo + c]
        return (gx,)

    return Tensor.from_op(out, (x,), backward, "channel_shortcut")


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization for (N, C) or (N, C, H, W) inputs.

    In training mode the batch statistics are used and the running buffers
    are updated in place; otherwise the running statistics are used.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    view = (1, -1) + (1,) * (x.ndim - 2)
    xd = x.data
    dt = xd.dtype.type
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = xd.size // xd.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(view).astype(xd.dtype)) * inv_std.reshape(view)
    out = xhat * gamma.data.reshape(view) + beta.data.reshape(view)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(view)
        if training:
            m = xd.size // xd.shape[1]
            gx = (inv_std.reshape(view) / dt(m)) * (
                dt(m) * gxhat - gxhat.sum(axis=axes).reshape(view) - xhat * (gxhat * xhat).sum(axis=axes).reshape(view)
            )
        else:
            gx = gxhat * inv_std.reshape(view)
        return gx, ggamma, gbeta

    return Tensor.from_op(out.astype(xd.dtype), (x, gamma, beta), backward, "batchnorm")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    Evaluated with max-subtraction so large logits do not overflow.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    n, c = logits.shape
    if n < 1 or labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    labels = labels.astype(np.int64)
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / n),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")
