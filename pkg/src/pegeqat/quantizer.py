"""Unified uniform quantizer: ``x_q = R(Clip(x, p, v, m), b, q)``.

The clip stage maps the input into a bounded latent value ``x_c``; the
round stage snaps it onto ``2**b`` uniformly spaced levels. Two clip
families carry trainable parameters:

* ``PACT``: ``x_c = 0.5 * (|x| - |x - m| + m)`` in ``[0, m]``, one trainable
  upper bound ``m`` shared with the round stage (the output is rescaled by
  ``m``).
* ``INTERVAL``: ``x_c = clamp((x - p1) / (p2 - p1), 0, 1)`` with a trainable
  interval ``[p1, p2]``.

``FIXED_UNIT`` clamps to ``[0, 1]`` and has no parameters.

Round families act on the normalized value ``u = x_c / width``:

* ``ACTIVATION``: ``round(n * u) / n`` in ``[0, 1]``
* ``WEIGHT``:     ``2 * (round(n * u) / n - 0.5)`` in ``[-1, 1]``

with ``n = 2**b - 1`` and ties rounded away from zero.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import kernels
from .errors import ConfigError, DegenerateIntervalError
from .estimators import EstimatorConfig, apply_estimator
from .tensor import Tensor

MAX_BITS = 8
FP_BITS = 32


class ClipFamily(str, enum.Enum):
    PACT = "PACT"
    INTERVAL = "INTERVAL"
    FIXED_UNIT = "FIXED_UNIT"


class RoundFamily(str, enum.Enum):
    ACTIVATION = "ACTIVATION"
    WEIGHT = "WEIGHT"


def _enum(cls, value):
    if isinstance(value, cls):
        return value
    try:
        return cls(str(value).upper())
    except ValueError:
        raise ConfigError(f"unknown {cls.__name__}: {value!r}") from None


@dataclass
class QuantizerSpec:
    """Bit-width, clip/round families and current parameter values.

    ``bits=None`` (or 32) is the full-precision bypass: the quantizer becomes
    the identity. ``out_scale`` is a frozen rescaling of the round output that
    returns quantized values to the magnitude of the data they replace; it
    is fixed at calibration and never trained.
    """

    bits: Optional[int] = 2
    clip_family: ClipFamily = ClipFamily.INTERVAL
    round_family: RoundFamily = RoundFamily.ACTIVATION
    m: float = 8.0
    p1: float = 0.0
    p2: float = 1.0
    out_scale: float = 1.0

    def __post_init__(self):
        self.clip_family = _enum(ClipFamily, self.clip_family)
        self.round_family = _enum(RoundFamily, self.round_family)
        if self.bits == FP_BITS:
            self.bits = None
        self.validate()

    def validate(self) -> None:
        if self.bits is not None and not (1 <= int(self.bits) <= MAX_BITS):
            raise ConfigError(f"bit width must be in [1, {MAX_BITS}] or {FP_BITS} (bypass), got {self.bits}")
        if self.clip_family is ClipFamily.PACT:
            if not self.m > 0:
                raise ConfigError(f"PACT upper bound m must be > 0, got {self.m}")
            if self.round_family is not RoundFamily.ACTIVATION:
                raise ConfigError("PACT clips to [0, m] and only pairs with the ACTIVATION round family")
        if self.clip_family is ClipFamily.INTERVAL and not self.p2 > self.p1:
            raise DegenerateIntervalError(f"interval [{self.p1}, {self.p2}] has non-positive width")
        if not self.out_scale > 0:
            raise ConfigError("out_scale must be > 0")

    @property
    def bypass(self) -> bool:
        return self.bits is None

    @property
    def levels(self) -> int:
        """Number of steps ``2**b - 1`` between the lowest and highest level."""
        return (1 << int(self.bits)) - 1

    @property
    def k_c(self) -> int:
        return {ClipFamily.PACT: 1, ClipFamily.INTERVAL: 2, ClipFamily.FIXED_UNIT: 0}[self.clip_family]

    @property
    def k_r(self) -> int:
        # PACT's round stage rescales by the same m; the others take no parameters
        return 1 if self.clip_family is ClipFamily.PACT else 0

    @property
    def bounds(self) -> tuple[float, float]:
        """Clip range ``(v, m)`` in the units of ``x_c``."""
        if self.clip_family is ClipFamily.PACT:
            return 0.0, float(self.m)
        return 0.0, 1.0

    @property
    def param_names(self) -> tuple[str, ...]:
        return {ClipFamily.PACT: ("m",), ClipFamily.INTERVAL: ("p1", "p2"), ClipFamily.FIXED_UNIT: ()}[self.clip_family]

    def geometry(self) -> tuple[float, float, float]:
        """``(lo, inv_width, width)`` of the affine map into the normalized domain."""
        if self.clip_family is ClipFamily.PACT:
            return 0.0, 1.0 / self.m, float(self.m)
        if self.clip_family is ClipFamily.INTERVAL:
            width = float(self.p2) - float(self.p1)
            return float(self.p1), 1.0 / width, width
        return 0.0, 1.0, 1.0

    def output_affine(self) -> tuple[float, float]:
        """``(a, c)`` such that ``x_q = a * r + c`` for normalized level ``r``."""
        scale = self.out_scale * (self.m if self.clip_family is ClipFamily.PACT else 1.0)
        if self.round_family is RoundFamily.WEIGHT:
            return 2.0 * scale, -scale
        return scale, 0.0


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def clip_forward(x, spec: QuantizerSpec) -> np.ndarray:
    """Clip stage. Returns ``x_c`` in the clip's own units (``[0, m]`` for PACT)."""
    xd = _data(x)
    if spec.bypass:
        return xd.copy()
    if spec.clip_family is ClipFamily.PACT:
        m = xd.dtype.type(spec.m)
        return 0.5 * (np.abs(xd) - np.abs(xd - m) + m)
    lo, inv, _ = spec.geometry()
    return kernels.quant_forward(xd, lo, inv, 1)[0]


def round_forward(x_c, spec: QuantizerSpec) -> np.ndarray:
    """Round stage on a normalized ``x_c`` in [0, 1] (no ``out_scale``)."""
    xd = _data(x_c)
    if spec.bypass:
        return xd.copy()
    r = kernels.quant_forward(xd, 0.0, 1.0, spec.levels)[1]
    if spec.round_family is RoundFamily.WEIGHT:
        return 2 * (r - xd.dtype.type(0.5))
    return r


def quantize_normalized(x, spec: QuantizerSpec) -> tuple[np.ndarray, np.ndarray]:
    """``(u, r)``: normalized clip output and its rounded level, both in [0, 1]."""
    lo, inv, _ = spec.geometry()
    return kernels.quant_forward(_data(x), lo, inv, spec.levels)


def quantize(x, spec: QuantizerSpec) -> tuple[np.ndarray, np.ndarray]:
    """Full forward quantizer. Returns ``(x_c, x_q)``.

    For PACT ``x_c`` lives in ``[0, m]`` and ``x_q`` is de-normalized back to
    the same range; for the other families ``x_c`` is already in [0, 1].
    """
    xd = _data(x)
    if spec.bypass:
        return xd.copy(), xd.copy()
    u, r = quantize_normalized(xd, spec)
    a, c = spec.output_affine()
    dt = xd.dtype.type
    x_q = dt(a) * r + dt(c)
    x_c = u * dt(spec.m) if spec.clip_family is ClipFamily.PACT else u
    return x_c, x_q


def clip_param_grad(spec: QuantizerSpec, x, upstream) -> dict[str, float]:
    """Gradient of the clip parameters, straight-through across the round.

    For PACT ``upstream`` is the gradient w.r.t. ``x_q`` and
    ``dL/dm = sum(upstream[x >= m])``. For INTERVAL ``upstream`` is the
    gradient w.r.t. the normalized ``x_c`` and the affine clamp is
    differentiated inside the open interval (zero outside).
    """
    xd = _data(x).astype(np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    if spec.bypass or spec.clip_family is ClipFamily.FIXED_UNIT:
        return {}
    if spec.clip_family is ClipFamily.PACT:
        return {"m": float(g[xd >= spec.m].sum() * spec.out_scale)}
    lo, inv, _ = spec.geometry()
    u = (xd - lo) * inv
    inside = (u > 0) & (u < 1)
    gi = g * inside
    return {"p1": float((gi * (u - 1)).sum() * inv), "p2": float((gi * -u).sum() * inv)}


class Quantizer:
    """Stateful per-layer quantizer with trainable clip parameters.

    Calling it on a :class:`Tensor` records one graph node whose backward
    applies the configured estimator at the round stage, the clip
    derivative w.r.t. the input, and :func:`clip_param_grad` w.r.t. the
    parameters. An optional boolean ``mask`` mixes precisions: elements
    with ``False`` pass the full-precision input through unchanged (and
    receive the identity gradient).
    """

    def __init__(self, spec: QuantizerSpec, dtype=np.float32, name: str = ""):
        self.spec = replace(spec)
        self.name = name
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {
            k: Tensor(np.asarray(getattr(self.spec, k), dtype=self.dtype), requires_grad=True, name=f"{name}.{k}")
            for k in self.spec.param_names
        }
        self.calibrated = self.spec.clip_family is not ClipFamily.INTERVAL or self.spec.bypass
        self.last_error = 0.0

    def sync(self) -> QuantizerSpec:
        """Pull trained parameter values back into ``spec`` and validate them."""
        for k, t in self.params.items():
            setattr(self.spec, k, float(t.data))
        self.spec.validate()
        return self.spec

    def calibrate(self, x: np.ndarray) -> None:
        """Warm start the interval from the range of ``x`` (INTERVAL only)."""
        if self.spec.bypass or self.spec.clip_family is not ClipFamily.INTERVAL:
            self.calibrated = True
            return
        lo, hi = float(np.min(x)), float(np.max(x))
        if self.spec.round_family is RoundFamily.WEIGHT:
            # symmetric interval so the zero-centred weight lattice is balanced
            bound = max(abs(lo), abs(hi), 1e-8)
            lo, hi = -bound, bound
        if hi - lo < 1e-8:
            hi = lo + 1e-8
        self.params["p1"].data = np.asarray(lo, dtype=self.dtype)
        self.params["p2"].data = np.asarray(hi, dtype=self.dtype)
        width = hi - lo
        self.spec.out_scale = width / 2 if self.spec.round_family is RoundFamily.WEIGHT else width
        self.sync()
        self.calibrated = True

    def __call__(
        self,
        x: Tensor,
        estimator: Optional[EstimatorConfig] = None,
        mu: float = 0.0,
        mask=None,
        record: bool = False,
    ) -> Tensor:
        spec = self.sync()
        if spec.bypass:
            if record:
                self.last_error = 0.0
            return x
        if mask is not None and np.ndim(mask) == 0 and not bool(mask):
            if record:
                self.last_error = 0.0
            return x
        estimator = estimator or EstimatorConfig(kind="STE")
        xd = x.data
        dt = xd.dtype.type
        lo, inv, _ = spec.geometry()
        u, r = kernels.quant_forward(xd, lo, inv, spec.levels)
        a, c = spec.output_affine()
        xq = dt(a) * r + dt(c)
        elementwise = mask is not None and np.ndim(mask) > 0
        if elementwise:
            mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
            out = np.where(mask, xq, xd)
        else:
            out = xq
        if record:
            # reported in the output domain: |a*u + c - (a*r + c)|
            err = np.abs(u - r) * abs(a)
            if elementwise:
                err = err[mask]
            self.last_error = float(err.mean()) if err.size else 0.0

        names = spec.param_names
        inputs = (x,) + tuple(self.params[k] for k in names)
        family = spec.clip_family

        def backward(g):
            gq = g * mask if elementwise else g
            g_r = gq * dt(a)
            g_u = apply_estimator(estimator, g_r, u, r, mu=mu)
            gx = g_u * dt(inv)
            if elementwise:
                gx = gx + g * ~mask
            grads = [gx]
            if family is ClipFamily.PACT:
                grads.append(np.asarray(clip_param_grad(spec, xd, gq)["m"], dtype=xd.dtype))
            elif family is ClipFamily.INTERVAL:
                pg = clip_param_grad(spec, xd, g_u)
                grads.append(np.asarray(pg["p1"], dtype=xd.dtype))
                grads.append(np.asarray(pg["p2"], dtype=xd.dtype))
            return tuple(grads)

        return Tensor.from_op(out.astype(xd.dtype, copy=False), inputs, backward, f"quantize[{family.value}]")

    def clip(self, x: Tensor) -> Tensor:
        """Differentiable clip stage alone (w.r.t. ``x`` and the parameters)."""
        spec = self.sync()
        xd = x.data
        dt = xd.dtype.type
        if spec.clip_family is ClipFamily.PACT:
            m = dt(spec.m)
            out = 0.5 * (np.abs(xd) - np.abs(xd - m) + m)

            def backward(g):
                inside = (xd > 0) & (xd < m)
                return g * inside, np.asarray((g * (xd >= m)).sum(), dtype=xd.dtype)

            return Tensor.from_op(out, (x, self.params["m"]), backward, "clip[PACT]")
        if spec.clip_family is ClipFamily.INTERVAL:
            lo, inv, _ = spec.geometry()
            u = kernels.quant_forward(xd, lo, inv, 1)[0]

            def backward(g):
                inside = (u > 0) & (u < 1)
                pg = clip_param_grad(spec, xd, g)
                return (
                    g * inside * dt(inv),
                    np.asarray(pg["p1"], dtype=xd.dtype),
                    np.asarray(pg["p2"], dtype=xd.dtype),
                )

            return Tensor.from_op(u, (x, self.params["p1"], self.params["p2"]), backward, "clip[INTERVAL]")
        u = np.clip(xd, 0, 1)
        return Tensor.from_op(u, (x,), lambda g: (g * ((xd > 0) & (xd < 1)),), "clip[FIXED_UNIT]")
