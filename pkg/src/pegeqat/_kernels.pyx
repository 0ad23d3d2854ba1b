# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: im2col/col2im for convolution and the fused
quantize / estimator-backward elementwise passes.

Every function here has a numpy twin in ``_fallback`` with the same
signature; ``pegeqat.kernels`` picks one at import.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport round as c_round

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    """Unfold ``x`` (N, C, H, W) into rows of shape (N*Ho*Wo, C*kh*kw)."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t ncol = c * kh * kw
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n * ho * wo, ncol), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t b, oy, ox, ch, ky, kx, iy, ix, row, col
    with nogil:
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    row = (b * ho + oy) * wo + ox
                    col = 0
                    for ch in range(c):
                        for ky in range(kh):
                            iy = oy * stride + ky - pad
                            for kx in range(kw):
                                ix = ox * stride + kx - pad
                                if 0 <= iy < h and 0 <= ix < w:
                                    out[row, col] = x[b, ch, iy, ix]
                                col = col + 1
    return out_arr


def col2im(real[:, ::1] cols, int n, int c, int h, int w,
           int kh, int kw, int stride, int pad):
    """Adjoint of :func:`im2col`: scatter-add rows back into (N, C, H, W)."""
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, oy, ox, ch, ky, kx, iy, ix, row, col
    # (ky, kx) outermost so each pixel accumulates in the same order as the
    # numpy fallback, which keeps the two backends bitwise identical.
    with nogil:
        for ky in range(kh):
            for kx in range(kw):
                for b in range(n):
                    for oy in range(ho):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(wo):
                            ix = ox * stride + kx - pad
                            if ix < 0 or ix >= w:
                                continue
                            row = (b * ho + oy) * wo + ox
                            for ch in range(c):
                                col = (ch * kh + ky) * kw + kx
                                out[b, ch, iy, ix] += cols[row, col]
    return out_arr


def quant_forward(real[::1] x, double lo, double inv_width, int levels):
    """Normalized clip then uniform round.

    Returns ``(x_c, r)`` with ``x_c = clamp((x - lo) * inv_width, 0, 1)`` and
    ``r = round_half_away(levels * x_c) / levels``.
    """
    cdef Py_ssize_t i, size = x.shape[0]
    dtype = np.float32 if real is float else np.float64
    xc_arr = np.empty(size, dtype=dtype)
    r_arr = np.empty(size, dtype=dtype)
    cdef real[::1] xc = xc_arr
    cdef real[::1] r = r_arr
    cdef double v, lv = levels
    with nogil:
        for i in range(size):
            v = (x[i] - lo) * inv_width
            if v < 0.0:
                v = 0.0
            elif v > 1.0:
                v = 1.0
            xc[i] = <real>v
            r[i] = <real>(c_round(lv * <double>xc[i]) / lv)
    return xc_arr, r_arr


def estimator_backward(real[::1] g, real[::1] xc, real[::1] r,
                       int kind, double mu, double delta):
    """Gradient at the clipped value from the gradient at the rounded value.

    kind 0 = STE, 1 = EWGS, 2 = PEGE. Elements with ``xc`` at 0 or 1 are
    clip-saturated and receive 0.
    """
    cdef Py_ssize_t i, size = g.shape[0]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty(size, dtype=dtype)
    cdef real[::1] out = out_arr
    cdef real gi, err, sgn
    cdef real mu_r = <real>mu, delta_r = <real>delta, one = 1
    with nogil:
        for i in range(size):
            if xc[i] <= 0 or xc[i] >= 1:
                out[i] = 0
                continue
            gi = g[i]
            if kind == 0:
                out[i] = gi
            elif kind == 1:
                err = xc[i] - r[i]
                sgn = (gi > 0) - (gi < 0)
                out[i] = gi * (one + delta_r * sgn * err)
            else:
                err = xc[i] - r[i]
                out[i] = gi + mu_r * err
    return out_arr
