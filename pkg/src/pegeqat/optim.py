"""SGD with momentum and Adam over lists of tensors.

The functional steps operate on plain arrays in place; the optimizer
classes keep per-parameter state and apply weight decay to the groups
that take it.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Sequence

import numpy as np

from .errors import DimensionError

NO_DECAY_GROUPS = ("quant", "norm", "bias")


def _check(params, grads):
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    for p, g in zip(params, grads):
        if g is not None and p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")


def sgd_momentum_step(params: Sequence[np.ndarray], grads, state: dict, lr: float, momentum: float = 0.9, nesterov: bool = False):
    """``v <- momentum*v + g``; ``p -= lr*(momentum*v + g)`` (nesterov) or ``p -= lr*v``."""
    _check(params, grads)
    bufs = state.setdefault("momentum", [None] * len(params))
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        v = bufs[i]
        v = g.copy() if v is None else momentum * v + g
        v = v.astype(p.dtype, copy=False)
        bufs[i] = v
        step = momentum * v + g if nesterov else v
        p -= (lr * step).astype(p.dtype, copy=False)
    return params, state


def adam_step(params: Sequence[np.ndarray], grads, state: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update."""
    _check(params, grads)
    t = state.get("t", 0) + 1
    state["t"] = t
    ms = state.setdefault("m", [None] * len(params))
    vs = state.setdefault("v", [None] * len(params))
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = np.zeros_like(p) if ms[i] is None else ms[i]
        v = np.zeros_like(p) if vs[i] is None else vs[i]
        dt = p.dtype.type
        m = dt(beta1) * m + dt(1 - beta1) * g
        v = dt(beta2) * v + dt(1 - beta2) * (g * g)
        ms[i], vs[i] = m, v
        mhat = m / dt(c1)
        vhat = v / dt(c2)
        p -= dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))
    return params, state


class Optimizer:
    def __init__(self, named_params, weight_decay: float = 0.0):
        self.entries = [(n, t, grp) for n, t, grp in named_params]
        self.weight_decay = weight_decay
        self.state: dict = {}

    def _grads(self):
        out = []
        for _, t, grp in self.entries:
            g = t.grad
            if g is not None and self.weight_decay and grp not in NO_DECAY_GROUPS:
                g = g + t.dtype.type(self.weight_decay) * t.data
            if g is not None:
                g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
            out.append(g)
        return out

    def _params(self):
        # 0-d tensors are updated through a 1-element view so in-place ops stick
        return [t.data if t.data.ndim else t.data.reshape(1) for _, t, _ in self.entries]

    def _grads_view(self):
        return [g if g is None or g.ndim else g.reshape(1) for g in self._grads()]

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for key, bufs in self.state.items():
            if isinstance(bufs, list):
                for (name, t, _), b in zip(self.entries, bufs):
                    out[f"opt/{key}/{name}"] = np.zeros(t.shape, t.dtype) if b is None else b.reshape(t.shape)
            else:
                out[f"opt/{key}"] = np.asarray([bufs], dtype=np.float32)
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        keys = {k.split("/")[1] for k in arrays if k.startswith("opt/")}
        for key in keys:
            if f"opt/{key}" in arrays:
                self.state[key] = int(arrays[f"opt/{key}"][0])
            else:
                self.state[key] = [
                    np.array(arrays[f"opt/{key}/{n}"], dtype=t.dtype).reshape(t.data.reshape(-1).shape if t.ndim == 0 else t.shape)
                    for n, t, _ in self.entries
                ]


class SGD(Optimizer):
    def __init__(self, named_params, momentum: float = 0.9, nesterov: bool = False, weight_decay: float = 0.0):
        super().__init__(named_params, weight_decay)
        self.momentum, self.nesterov = momentum, nesterov

    def step(self, lr: float) -> None:
        sgd_momentum_step(self._params(), self._grads_view(), self.state, lr, self.momentum, self.nesterov)


class Adam(Optimizer):
    def __init__(self, named_params, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(named_params, weight_decay)
        self.betas, self.eps = betas, eps

    def step(self, lr: float) -> None:
        adam_step(self._params(), self._grads_view(), self.state, lr, self.betas[0], self.betas[1], self.eps)
