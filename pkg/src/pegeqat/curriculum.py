"""Time-varying scalars and progressive precision replacement.

The replacing rate ``p_T`` is the per-step probability that a weight group
uses its quantized value instead of the full-precision one. The logarithmic
schedule is ``p_T = min(log_B(k*T + b_off), 1)``; it is parameterized here by
the initial rate ``p0`` and the step ``t_full`` at which it first reaches 1:
``b_off = B**p0`` and ``k = (B - b_off) / t_full``.

The correction strength grows as ``mu_T = mu_max * (1 - exp(-k_mu * T))`` and
the learning rate follows a cosine decay to zero.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError


class ScheduleFamily(str, enum.Enum):
    CONSTANT = "CONSTANT"
    LINEAR = "LINEAR"
    LOGARITHMIC = "LOGARITHMIC"
    EXPONENTIAL = "EXPONENTIAL"
    COSINE = "COSINE"
    NONE = "NONE"


class Granularity(str, enum.Enum):
    GLOBAL = "GLOBAL"
    PER_LAYER = "PER_LAYER"
    PER_ELEMENT = "PER_ELEMENT"


def _family(value) -> ScheduleFamily:
    try:
        return ScheduleFamily(str(value).upper().split(".")[-1])
    except ValueError:
        raise ConfigError(f"unknown schedule family {value!r}") from None


@dataclass
class ScheduleSpec:
    family: ScheduleFamily = ScheduleFamily.LOGARITHMIC
    p0: float = 0.3
    t_full: float = 1000.0
    base: float = 10.0
    p_const: float = 0.8
    mu_family: ScheduleFamily = ScheduleFamily.EXPONENTIAL
    mu_max: float = 0.1
    k_mu: float = 1e-3
    total_steps: int = 0

    def __post_init__(self):
        self.family = _family(self.family)
        self.mu_family = _family(self.mu_family)
        if self.mu_family in (ScheduleFamily.COSINE, ScheduleFamily.NONE):
            raise ConfigError(f"mu schedule family {self.mu_family.value} is not supported")
        if not self.base > 1:
            raise ConfigError(f"logarithm base must be > 1, got {self.base}")
        if not 0 < self.p0 <= 1:
            raise ConfigError(f"initial replacing rate must be in (0, 1], got {self.p0}")
        if not 0 <= self.p_const <= 1:
            raise ConfigError(f"constant replacing rate must be in [0, 1], got {self.p_const}")
        if not self.t_full > 0:
            raise ConfigError("t_full must be > 0")
        if self.mu_max < 0:
            raise ConfigError("mu_max must be >= 0")
        if not self.k_mu > 0:
            raise ConfigError("k_mu must be > 0")

    @classmethod
    def for_run(cls, total_steps: int, t_full_frac: float = 0.6, mu_reach_frac: float = 0.8, **kw) -> "ScheduleSpec":
        """Defaults scaled to a run: full replacement at ``t_full_frac`` of the
        steps and ``mu`` at 99% of ``mu_max`` after ``mu_reach_frac`` of them."""
        steps = max(int(total_steps), 1)
        kw.setdefault("t_full", max(t_full_frac * steps, 1.0))
        kw.setdefault("k_mu", math.log(100.0) / max(mu_reach_frac * steps, 1.0))
        return cls(total_steps=int(total_steps), **kw)

    @property
    def b_off(self) -> float:
        """Offset inside the logarithm; ``log_B(b_off)`` is the basic rate."""
        return self.base**self.p0

    @property
    def k(self) -> float:
        return (self.base - self.b_off) / self.t_full


def _log_rate(spec: ScheduleSpec, T: float) -> float:
    v = spec.k * T + spec.b_off
    # k * t_full + b_off == B by construction; compare on T so the clamp is
    # exact rather than subject to rounding in k
    if T >= spec.t_full or v >= spec.base:
        return 1.0
    return min(math.log(v) / math.log(spec.base), 1.0)


def replacement_rate_at(spec: ScheduleSpec, T: int) -> float:
    if T < 0:
        raise ContractError("step must be >= 0")
    fam, p0 = spec.family, spec.p0
    frac = min(T / spec.t_full, 1.0)
    if fam is ScheduleFamily.CONSTANT:
        p = spec.p_const
    elif fam is ScheduleFamily.LINEAR:
        p = p0 + (1 - p0) * frac
    elif fam is ScheduleFamily.LOGARITHMIC:
        p = _log_rate(spec, T)
    elif fam is ScheduleFamily.EXPONENTIAL:
        p = p0 * (1 / p0) ** frac
    elif fam is ScheduleFamily.COSINE:
        p = p0 + (1 - p0) * 0.5 * (1 - math.cos(math.pi * frac))
    else:
        p = 1.0
    return min(max(p, 0.0), 1.0)


def mu_at(spec: ScheduleSpec, T: int) -> float:
    if T < 0:
        raise ContractError("step must be >= 0")
    fam, mu_max = spec.mu_family, spec.mu_max
    if fam is ScheduleFamily.EXPONENTIAL:
        mu = mu_max * (1 - math.exp(-spec.k_mu * T))
    elif fam is ScheduleFamily.CONSTANT:
        mu = mu_max
    elif fam is ScheduleFamily.LINEAR:
        mu = mu_max * min(T / spec.t_full, 1.0)
    else:
        mu = mu_max * _log_rate(spec, T)
    return min(max(mu, 0.0), mu_max)


def lr_at(eta0: float, T: int, T_max: int) -> float:
    """Cosine annealing from ``eta0`` at step 0 to exactly 0 at ``T_max``."""
    if T < 0 or T > T_max:
        raise ContractError(f"step {T} outside [0, {T_max}]")
    if T == T_max:
        return 0.0
    return eta0 * 0.5 * (1 + math.cos(math.pi * T / T_max))


@dataclass
class ReplacementState:
    """Seed and granularity of the Bernoulli replacement stream.

    Draws are keyed by ``(seed, T, layer, stream)`` through a counter-based
    Philox generator, so a mask never depends on what was drawn before it.
    """

    rng_seed: int = 0
    step: int = 0
    granularity: Granularity = Granularity.PER_LAYER
    last_mask: list = field(default_factory=list)

    def __post_init__(self):
        try:
            self.granularity = Granularity(str(self.granularity).upper().split(".")[-1])
        except ValueError:
            raise ConfigError(f"unknown granularity {self.granularity!r}") from None


_GLOBAL_LAYER = 2**32 - 1


def uniform_stream(seed: int, T: int, layer: int, stream: int, size) -> np.ndarray:
    """Uniform [0, 1) draws at counter ``(T, layer, stream, 0)`` under key ``seed``."""
    key = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    bitgen = np.random.Philox(key=key, counter=[T, layer, stream, 0])
    return np.random.Generator(bitgen).random(size)


def mask_for(seed: int, granularity: Granularity, p_T: float, T: int, layer: int, stream: int, shape):
    """Replacement draw for one tensor: a bool, or a bool array for PER_ELEMENT."""
    if granularity is Granularity.GLOBAL:
        return bool(uniform_stream(seed, T, _GLOBAL_LAYER, stream, 1)[0] < p_T)
    if granularity is Granularity.PER_LAYER:
        return bool(uniform_stream(seed, T, layer, stream, 1)[0] < p_T)
    return uniform_stream(seed, T, layer, stream, tuple(shape)) < p_T


def sample_replacement(
    state: ReplacementState,
    p_T: float,
    layer_shapes: Sequence[tuple],
    T: Optional[int] = None,
    stream: int = 0,
) -> list:
    """One replacement mask per layer.

    GLOBAL yields the same boolean for every layer, PER_LAYER one boolean
    per layer, PER_ELEMENT a boolean array of each layer's shape. Every bit
    is 1 with probability ``p_T``.
    """
    if not 0.0 <= p_T <= 1.0:
        raise ContractError(f"replacing rate {p_T} outside [0, 1]")
    T = state.step if T is None else T
    masks = [
        mask_for(state.rng_seed, state.granularity, p_T, T, i, stream, s) for i, s in enumerate(layer_shapes)
    ]
    state.step = T
    state.last_mask = masks
    return masks


def mix_precision(w_f: np.ndarray, w_q: np.ndarray, mask) -> np.ndarray:
    """Select ``w_q`` where ``mask`` is set and ``w_f`` elsewhere."""
    w_f, w_q = np.asarray(w_f), np.asarray(w_q)
    if w_f.shape != w_q.shape:
        raise DimensionError(f"full-precision {w_f.shape} and quantized {w_q.shape} shapes differ")
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim and mask.shape != w_f.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match tensor shape {w_f.shape}")
    return np.where(mask, w_q, w_f)
