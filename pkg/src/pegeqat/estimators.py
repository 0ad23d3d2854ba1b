"""Backward rules at the quantization node.

Each rule maps the gradient w.r.t. the rounded value to the gradient w.r.t.
the clipped value. All of them work in the normalized [0, 1] domain of the
clip output and zero the gradient where the clip saturated (``x_c`` at 0 or
1), since the clip's own derivative vanishes there whatever the estimator.

* STE:  ``g_c = g_q``
* EWGS: ``g_c = g_q * (1 + delta * sign(g_q) * (x_c - x_q))``
* PEGE: ``g_c = g_q + mu * (x_c - x_q)``

The PEGE term is additive and independent of ``g_q``: it is the gradient of
``mu/2 * (x_c - x_q)**2`` with ``x_q`` held fixed, so gradient descent pulls
latent values toward their lattice points while the task loss trains them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionError


class EstimatorKind(str, enum.Enum):
    STE = "STE"
    EWGS = "EWGS"
    PEGE = "PEGE"


_KIND_CODE = {EstimatorKind.STE: kernels.STE, EstimatorKind.EWGS: kernels.EWGS, EstimatorKind.PEGE: kernels.PEGE}


@dataclass
class EstimatorConfig:
    """Backward-rule selection.

    ``mu`` is the static correction strength used when no schedule is
    attached; during training the harness passes the scheduled value
    instead. ``delta`` is the EWGS scaling factor.
    """

    kind: EstimatorKind = EstimatorKind.PEGE
    mu: float = 0.0
    delta: float = 1e-3

    def __post_init__(self):
        self.kind = EstimatorKind(str(self.kind).upper().split(".")[-1])
        if self.mu < 0:
            raise ConfigError("estimator mu must be >= 0")
        if self.delta < 0:
            raise ConfigError("estimator delta must be >= 0")


def _check(g_q, x_c, x_q):
    g_q, x_c, x_q = np.asarray(g_q), np.asarray(x_c), np.asarray(x_q)
    if not (g_q.shape == x_c.shape == x_q.shape):
        raise DimensionError(f"estimator operands differ in shape: {g_q.shape}, {x_c.shape}, {x_q.shape}")
    if g_q.dtype not in (np.float32, np.float64):
        g_q = g_q.astype(np.float64)
    return g_q, x_c, x_q


def ste_backward(g_q, x_c, x_q) -> np.ndarray:
    g_q, x_c, x_q = _check(g_q, x_c, x_q)
    return kernels.estimator_backward(g_q, x_c, x_q, kernels.STE)


def ewgs_backward(g_q, x_c, x_q, delta: float) -> np.ndarray:
    if delta < 0:
        raise ConfigError("delta must be >= 0")
    g_q, x_c, x_q = _check(g_q, x_c, x_q)
    return kernels.estimator_backward(g_q, x_c, x_q, kernels.EWGS, delta=delta)


def pege_backward(g_q, x_c, x_q, mu: float) -> np.ndarray:
    if mu < 0:
        raise ConfigError("mu must be >= 0")
    g_q, x_c, x_q = _check(g_q, x_c, x_q)
    return kernels.estimator_backward(g_q, x_c, x_q, kernels.PEGE, mu=mu)


def apply_estimator(cfg: EstimatorConfig, g_q, x_c, x_q, mu: float | None = None) -> np.ndarray:
    """Dispatch on ``cfg.kind``; ``mu`` overrides ``cfg.mu`` when given."""
    mu = cfg.mu if mu is None else mu
    return kernels.estimator_backward(g_q, x_c, x_q, _KIND_CODE[cfg.kind], mu=mu, delta=cfg.delta)
