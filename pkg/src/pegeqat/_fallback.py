"""Pure numpy implementations of the compiled kernels in ``_kernels.pyx``.

Results match the compiled versions bit for bit on the same dtype; the
test-suite checks this for every kernel.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

STE, EWGS, PEGE = 0, 1, 2


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, kh, kw) -> (N, Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols6 = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ky in range(kh):
        for kx in range(kw):
            out[:, :, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride] += (
                cols6[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
            )
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def round_half_away(v):
    """Round to nearest integer, ties away from zero (C ``round``)."""
    a = np.abs(v)
    f = np.floor(a)
    return np.copysign(f + (a - f >= 0.5), v)


def quant_forward(x, lo, inv_width, levels):
    v = np.clip((x.astype(np.float64) - lo) * inv_width, 0.0, 1.0)
    xc = v.astype(x.dtype)
    r = (round_half_away(levels * xc.astype(np.float64)) / levels).astype(x.dtype)
    return xc, r


def estimator_backward(g, xc, r, kind, mu, delta):
    dt = g.dtype.type
    if kind == STE:
        out = g.copy()
    elif kind == EWGS:
        err = xc - r
        out = g * (dt(1) + dt(delta) * np.sign(g) * err)
    else:
        out = g + dt(mu) * (xc - r)
    out[(xc <= 0) | (xc >= 1)] = 0
    return out
