"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations in :mod:`pegeqat.ops`
create new tensors that remember how they were produced through a
:class:`GradNode`; :meth:`Tensor.backward` walks those nodes in reverse
topological order and accumulates gradients into ``.grad``.

The precision of a graph is the dtype of its leaves: float64 for oracle
and test graphs, float32 for training.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError

_GRAD_ENABLED = True
_CHECK_FINITE = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def check_finite(arr: np.ndarray, tag: str) -> None:
    """Raise :class:`NonFiniteError` if ``arr`` holds NaN or Inf."""
    if not _CHECK_FINITE or arr.size == 0:
        return
    # a single reduction is much cheaper than isfinite().all(); any NaN/Inf
    # element makes the sum non-finite
    with np.errstate(over="ignore", invalid="ignore"):
        total = float(np.add.reduce(arr, axis=None))
    if not math.isfinite(total) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {tag}")


class GradNode:
    """Record of one operation in the graph."""

    __slots__ = ("inputs", "backward_fn", "tag")

    def __init__(self, inputs: Sequence["Tensor"], backward_fn: Callable, tag: str):
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.tag = tag

    def __repr__(self):
        return f"GradNode({self.tag}, n_inputs={len(self.inputs)})"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[GradNode] = None
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, inputs: Sequence["Tensor"], backward_fn: Callable, tag: str) -> "Tensor":
        """Wrap the result of an operation and, when recording, attach its node.

        ``backward_fn`` maps the upstream gradient array to a tuple with one
        entry per input (``None`` for inputs that need no gradient).
        """
        check_finite(data, tag)
        out = cls(data)
        if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.node = GradNode(inputs, backward_fn, tag)
        return out

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f", node={self.node.tag}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.scale(other, -1.0))

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def sum(self):
        from . import ops

        return ops.sum(self)

    def mean(self):
        from . import ops

        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    # -- autodiff -------------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)


def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root``, parents before children.

    Iterative DFS visiting inputs in their recorded order, so the result is a
    pure function of the construction order.
    """
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in reversed(t.node.inputs):
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Populate ``.grad`` of every tensor that requires grad and feeds ``loss``.

    Gradients add onto any existing ``.grad``; call ``zero_grad`` between
    steps to reset them.
    """
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype)
        if grad.shape != loss.shape:
            raise ContractError("seed gradient shape differs from output shape")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    order = topological_order(loss)
    pending = {id(loss): grad}
    for t in reversed(order):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        if t.grad is None:
            # leaves own their buffers; intermediates may share with siblings
            t.grad = g.copy() if t.node is None else g
        else:
            t.grad = t.grad + g
        node = t.node
        if node is None:
            continue
        in_grads = node.backward_fn(g)
        if len(in_grads) != len(node.inputs):
            raise ContractError(f"{node.tag}: backward returned {len(in_grads)} grads for {len(node.inputs)} inputs")
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ContractError(f"{node.tag}: gradient shape {pg.shape} != input shape {parent.shape}")
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of ``x``.

    ``f`` is evaluated without graph recording; ``x.data`` is restored after
    every probe. Intended for float64 inputs away from non-differentiable
    points.
    """
    base = x.data
    flat = base.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out.reshape(base.shape)
