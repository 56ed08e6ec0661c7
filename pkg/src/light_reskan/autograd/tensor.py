"""Dense tensor value type and the reverse-mode tape.

Every differentiable primitive produces a :class:`Tensor` whose ``node``
records the parents and a closure mapping the output gradient to one
gradient per parent.  :func:`backward` walks the tape in reverse creation
order and accumulates into leaf tensors (``requires_grad=True`` and no node).
"""

from __future__ import annotations

import contextlib
import itertools
import os
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import ConfigurationError, UsageError

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True
_debug = os.environ.get("LIGHT_RESKAN_DEBUG", "") not in ("", "0")
_counter = itertools.count()


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug(flag: bool) -> None:
    """Toggle the NaN assertion run after every primitive."""
    global _debug
    _debug = bool(flag)


class TapeNode:
    __slots__ = ("op", "parents", "backward_fn", "shape", "order")

    def __init__(self, op: str, parents: Sequence["Tensor"], backward_fn: Callable, shape):
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.shape = shape
        # creation order; any reverse-sorted sweep is a valid backward order
        self.order = next(_counter)


class Tensor:
    """N-dimensional float array that may participate in the gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in SUPPORTED_DTYPES else np.float32
        dtype = np.dtype(dtype)
        if dtype not in SUPPORTED_DTYPES:
            raise ConfigurationError(f"unsupported dtype {dtype}; expected float32 or float64")
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None if self.grad is None else np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar; implementations live in ops ----------------------
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __getitem__(self, index):
        from . import ops

        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """Leaf tensor owned by a module; ``name`` is its dotted registry path."""

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def make_result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a primitive's output and record it on the tape when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    out.requires_grad = False
    if _debug and data.size and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = TapeNode(op, parents, backward_fn, data.shape)
    return out


def backward(root: Tensor) -> None:
    """Reverse sweep from a scalar root; leaf gradients accumulate with ``+=``."""
    if root.data.size != 1:
        raise UsageError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise UsageError("backward() root is not on the tape (requires_grad is False)")
    if root.node is None:
        root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1
        return

    nodes = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in nodes:
            continue
        nodes[id(t)] = t
        for p in t.node.parents:
            if p.node is not None and id(p) not in nodes:
                stack.append(p)

    grads = {id(root): np.ones_like(root.data)}
    for t in sorted(nodes.values(), key=lambda t: t.node.order, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.node is None:
                if p.grad is None:
                    p.grad = np.array(pg, dtype=p.dtype, copy=True).reshape(p.shape)
                else:
                    p.grad += pg.reshape(p.shape)
            else:
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
