"""Polynomial bases over tanh-normalized inputs.

The Gram basis follows the three-term recurrence

    G_0 = 1,  G_1 = x~,  G_k = x~ * G_{k-1} - beta_k * G_{k-2}   (k >= 2)

with learnable ``beta_k``.  With every ``beta_k = 0`` it degenerates to the
monomials ``x~**k``, which is exactly the ``monomial`` basis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..autograd import Parameter, Tensor
from ..autograd.tensor import make_result
from ..errors import ConfigurationError


@dataclass
class GramBasisParams:
    """Degree and the D-1 recurrence coefficients (None means all zero)."""

    degree: int
    beta: Optional[Tensor] = None

    def __post_init__(self):
        if self.degree < 1:
            raise ConfigurationError(f"polynomial degree must be >= 1, got {self.degree}")
        if self.beta is not None and self.beta.shape != (self.degree - 1,):
            raise ConfigurationError(
                f"expected {self.degree - 1} recurrence coefficients, got shape {self.beta.shape}"
            )


def _recurrence(xt: np.ndarray, beta: Optional[np.ndarray], degree: int) -> list[np.ndarray]:
    g = [np.ones_like(xt), xt]
    for k in range(2, degree + 1):
        nxt = xt * g[k - 1]
        if beta is not None:
            nxt = nxt - beta[k - 2] * g[k - 2]
        g.append(nxt)
    return g[: degree + 1]


def gram_basis(xt: Tensor, params: GramBasisParams, axis: int = -1) -> Tensor:
    """Stack G_0..G_D of ``xt`` along a new ``axis``; differentiable in xt and beta."""
    degree = params.degree
    beta_t = params.beta
    bd = None if beta_t is None else beta_t.data
    g = _recurrence(xt.data, bd, degree)
    out = np.stack(g, axis=axis)
    parents = (xt,) if beta_t is None else (xt, beta_t)

    def bw(grad):
        adj = list(np.moveaxis(grad, axis, 0).copy())
        x = xt.data
        gx = np.zeros_like(x)
        gb = None if bd is None else np.zeros(bd.shape, np.float64)  # long reductions: accumulate wide
        for k in range(degree, 1, -1):
            gx += g[k - 1] * adj[k]
            adj[k - 1] = adj[k - 1] + x * adj[k]
            if bd is not None:
                adj[k - 2] = adj[k - 2] - bd[k - 2] * adj[k]
                gb[k - 2] = -np.sum(g[k - 2] * adj[k], dtype=np.float64)
        gx += adj[1]
        return (gx,) if gb is None else (gx, gb.astype(bd.dtype))

    return make_result("gram_basis", out, parents, bw)


def monomial_basis(xt: Tensor, degree: int, axis: int = -1) -> Tensor:
    return gram_basis(xt, GramBasisParams(degree), axis)


# -- pluggable basis registry ------------------------------------------------


@dataclass(frozen=True)
class BasisKind:
    name: str
    learnable_coefficients: Callable[[int], int]
    implemented: bool = True


BASES = {
    "gram": BasisKind("gram", lambda d: max(d - 1, 0)),
    "monomial": BasisKind("monomial", lambda d: 0),
    "spline": BasisKind("spline", lambda d: 0, implemented=False),
}


def resolve_basis(name: str) -> BasisKind:
    try:
        kind = BASES[name]
    except KeyError:
        raise ConfigurationError(f"unknown basis {name!r}; valid: {sorted(BASES)}") from None
    if not kind.implemented:
        raise ConfigurationError(f"basis {name!r} is an interface stub only; use 'gram' or 'monomial'")
    return kind


def make_beta(basis: str, degree: int, dtype=np.float32) -> Optional[Parameter]:
    n = resolve_basis(basis).learnable_coefficients(degree)
    return Parameter(np.zeros(n, dtype=dtype)) if n else None
