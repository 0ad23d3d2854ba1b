"""Backend selection for the hot kernels.

The compiled Cython module is used when it was built and importable;
otherwise the numpy fallback is used. Setting ``PEGEQAT_PURE=1`` forces
the fallback. ``BACKEND`` names the active choice.
"""

import os

import numpy as np

from . import _fallback

STE, EWGS, PEGE = _fallback.STE, _fallback.EWGS, _fallback.PEGE

_compiled = None
if not os.environ.get("PEGEQAT_PURE"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"


def backends():
    """Mapping of available backend name -> module."""
    out = {"numpy": _fallback}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


_impl = _compiled if _compiled is not None else _fallback


def im2col(x, kh, kw, stride, pad):
    return _impl.im2col(np.ascontiguousarray(x), kh, kw, stride, pad)


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    return _impl.col2im(np.ascontiguousarray(cols), n, c, h, w, kh, kw, stride, pad)


def quant_forward(x, lo, inv_width, levels):
    """Flat clip-normalize + round; see ``_kernels.quant_forward``."""
    flat = np.ascontiguousarray(x).reshape(-1)
    xc, r = _impl.quant_forward(flat, float(lo), float(inv_width), int(levels))
    return xc.reshape(x.shape), r.reshape(x.shape)


def estimator_backward(g, xc, r, kind, mu=0.0, delta=0.0):
    shape = g.shape
    out = _impl.estimator_backward(
        np.ascontiguousarray(g).reshape(-1),
        np.ascontiguousarray(xc, dtype=g.dtype).reshape(-1),
        np.ascontiguousarray(r, dtype=g.dtype).reshape(-1),
        int(kind),
        float(mu),
        float(delta),
    )
    return out.reshape(shape)
