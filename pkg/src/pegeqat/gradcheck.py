"""Finite-difference checks of every differentiable op, plus estimator identities.

Each op is wrapped as a scalar ``sum(op(inputs) * R)`` with a fixed random
projection ``R`` and checked in float64 against central differences.
Inputs are drawn away from kinks (ReLU at 0, clip bounds, max-pool ties).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import ops
from .estimators import ewgs_backward, pege_backward, ste_backward
from .quantizer import ClipFamily, Quantizer, QuantizerSpec, RoundFamily
from .tensor import Tensor, backward, finite_diff_grad

DEFAULT_TOL = 1e-4
DEFAULT_H = 1e-5


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.instances} instances, max rel err {self.max_rel_err:.3e} (tol {self.tol:g})"


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; 0 when both vanish."""
    a, n = np.asarray(analytic, np.float64).ravel(), np.asarray(numeric, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom < 1e-300:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def check_op(build: Callable[..., Tensor], inputs: list, rng: np.random.Generator, h: float = DEFAULT_H) -> float:
    """Max relative error over all inputs of ``build`` (inputs are float64 Tensors)."""
    out = build(*inputs)
    proj = Tensor(rng.standard_normal(out.shape))

    def scalar(*_):
        return ops.sum(ops.mul(build(*inputs), proj))

    for t in inputs:
        t.grad = None
    backward(scalar())
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        num = finite_diff_grad(lambda _x: scalar(), t, h)
        worst = max(worst, rel_err(t.grad, num))
    return worst


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away_from(x: np.ndarray, points, gap: float) -> np.ndarray:
    for p in points:
        near = np.abs(x - p) < gap
        x = np.where(near, p + np.copysign(gap * 2, x - p + 1e-300), x)
    return x


# each case: rng -> (build, inputs)
def _case_matmul(rng):
    return ops.matmul, [_t(rng.standard_normal((3, 4))), _t(rng.standard_normal((4, 5)))]


def _case_linear(rng):
    return ops.linear, [_t(rng.standard_normal((3, 6))), _t(rng.standard_normal((4, 6))), _t(rng.standard_normal(4))]


def _case_conv2d(rng):
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = _t(rng.standard_normal((2, 2, 5, 5)))
    w = _t(rng.standard_normal((3, 2, 3, 3)))
    return (lambda a, b: ops.conv2d(a, b, stride, pad)), [x, w]


def _case_relu(rng):
    return ops.relu, [_t(_away_from(rng.standard_normal((4, 5)), [0.0], 1e-2))]


def _case_maxpool(rng):
    # distinct values per window: a permutation scaled well above the FD step
    x = rng.permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) * 0.1 + rng.uniform(0, 0.01, (2, 2, 4, 4))
    return ops.maxpool2d, [_t(x)]


def _case_global_avgpool(rng):
    return ops.global_avgpool, [_t(rng.standard_normal((2, 3, 4, 4)))]


def _case_batchnorm(rng):
    c = 3
    rm, rv = np.zeros(c), np.ones(c)

    def build(x, g, b):
        return ops.batchnorm(x, g, b, rm.copy(), rv.copy(), training=True)

    return build, [_t(rng.standard_normal((4, c, 3, 3))), _t(rng.uniform(0.5, 1.5, c)), _t(rng.standard_normal(c))]


def _case_cross_entropy(rng):
    labels = rng.integers(0, 5, 6)
    return (lambda z: ops.cross_entropy(z, labels)), [_t(rng.standard_normal((6, 5)) * 2)]


def _case_clip_pact(rng):
    m = float(rng.uniform(1.0, 3.0))
    q = Quantizer(QuantizerSpec(bits=2, clip_family=ClipFamily.PACT, m=m), dtype=np.float64)
    x = _away_from(rng.uniform(-1, m + 1, (4, 5)), [0.0, m], 1e-2)
    return (lambda a, mm: q.clip(a)), [_t(x), q.params["m"]]


def _case_clip_interval(rng):
    p1 = float(rng.uniform(-1.5, -0.5))
    p2 = float(rng.uniform(0.5, 1.5))
    spec = QuantizerSpec(bits=2, clip_family=ClipFamily.INTERVAL, round_family=RoundFamily.ACTIVATION, p1=p1, p2=p2)
    q = Quantizer(spec, dtype=np.float64)
    x = _away_from(rng.uniform(-2, 2, (4, 5)), [p1, p2], 1e-2)
    return (lambda a, lo, hi: q.clip(a)), [_t(x), q.params["p1"], q.params["p2"]]


OP_CASES = {
    "matmul": _case_matmul,
    "linear": _case_linear,
    "conv2d": _case_conv2d,
    "relu": _case_relu,
    "maxpool2d": _case_maxpool,
    "global_avgpool": _case_global_avgpool,
    "batchnorm": _case_batchnorm,
    "cross_entropy": _case_cross_entropy,
    "clip_pact": _case_clip_pact,
    "clip_interval": _case_clip_interval,
}


def run_op(name: str, instances: int = 10, seed: int = 0, tol: float = DEFAULT_TOL, h: float = DEFAULT_H) -> CheckResult:
    case = OP_CASES[name]
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        build, inputs = case(rng)
        worst = max(worst, check_op(build, inputs, rng, h))
    return CheckResult(name, instances, worst, tol)


def estimator_identities(n: int = 1000, seed: int = 0) -> list[CheckResult]:
    """PEGE minus STE equals ``mu*(x_c - x_q)``; ``mu=0`` and ``delta=0`` are bitwise STE."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(n)
    x_c = rng.uniform(0.001, 0.999, n)
    x_q = np.round(x_c * 3) / 3
    mu = rng.uniform(0, 1, n)
    ste = ste_backward(g, x_c, x_q)
    diff = np.array([pege_backward(g[i : i + 1], x_c[i : i + 1], x_q[i : i + 1], mu[i])[0] for i in range(n)]) - ste
    want = mu * (x_c - x_q)
    eq5 = float(np.max(np.abs(diff - want)))
    mu0 = float(np.max(np.abs(pege_backward(g, x_c, x_q, 0.0) - ste)))
    d0 = float(np.max(np.abs(ewgs_backward(g, x_c, x_q, 0.0) - ste)))
    return [
        CheckResult("pege_minus_ste", n, eq5, 1e-12),
        CheckResult("pege_mu0_is_ste", n, mu0, 0.0),
        CheckResult("ewgs_delta0_is_ste", n, d0, 0.0),
    ]


def run_suite(op: Optional[str] = None, instances: int = 10, seed: int = 0) -> list[CheckResult]:
    if op is not None and op not in OP_CASES and op != "estimators":
        raise KeyError(f"unknown op {op!r}; choose from {sorted(OP_CASES) + ['estimators']}")
    results = []
    names = [op] if op in OP_CASES else ([] if op == "estimators" else list(OP_CASES))
    for name in names:
        results.append(run_op(name, instances, seed))
    if op is None or op == "estimators":
        results.extend(estimator_identities(seed=seed))
    return results
