"""The Gram activation phi(x) = sum_k w_k G_k(tanh x) + w_m * silu(x)."""

from __future__ import annotations

from dataclasses import dataclass

from ..autograd import Tensor, ops
from ..errors import ConfigurationError
from .basis import GramBasisParams, gram_basis


@dataclass
class GramActivationParams:
    w: Tensor  # [D+1] basis weights
    w_m: Tensor  # scalar residual weight
    basis: GramBasisParams

    def __post_init__(self):
        if self.w.shape != (self.basis.degree + 1,):
            raise ConfigurationError(f"w must have D+1={self.basis.degree + 1} entries, got shape {self.w.shape}")
        if self.w_m.size != 1:
            raise ConfigurationError("w_m must be a scalar")


def gram_activation(x: Tensor, params: GramActivationParams) -> Tensor:
    """Apply one activation unit elementwise to any-shaped ``x``."""
    shape = x.shape
    d1 = params.basis.degree + 1
    g = gram_basis(ops.tanh(x), params.basis, axis=-1).reshape(-1, d1)
    poly = ops.einsum("pk,k->p", g, params.w).reshape(shape)
    return poly + ops.mul(ops.silu(x), params.w_m.reshape(()))
