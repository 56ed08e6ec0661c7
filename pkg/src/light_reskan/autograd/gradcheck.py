"""Central finite-difference oracle for tape gradients.

The oracle only ever calls the forward function on perturbed numpy copies,
so it stays independent of every backward rule it checks.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max|a - b| scaled by max(max|b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


def numeric_grad(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-6) -> np.ndarray:
    """d fn() / d tensor by central differences; ``fn`` must return a scalar."""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-6,
    floor: float = 1e-8,
) -> dict:
    """Compare tape gradients of scalar ``fn()`` against finite differences.

    Returns ``{index: relative_error}`` for every input.
    """
    for t in inputs:
        t.grad = None
    out = fn()
    backward(out)
    errors = {}
    for i, t in enumerate(inputs):
        tape = np.zeros_like(t.data) if t.grad is None else t.grad
        errors[i] = relative_error(tape, numeric_grad(fn, t, h), floor)
    return errors
