from .activation import GramActivationParams, gram_activation
from .basis import BASES, GramBasisParams, gram_basis, monomial_basis, resolve_basis
from .conv import (
    ELEMENTWISE_PATHS,
    PATHS,
    SHARED_PATHS,
    InitSpec,
    KanConvLayer,
    expand_basis,
    init_layer,
    kan_conv,
    kan_conv_decoupled,
    kan_conv_direct,
    kan_conv_expanded,
    kan_conv_fused,
)

__all__ = [
    "BASES",
    "ELEMENTWISE_PATHS",
    "GramActivationParams",
    "GramBasisParams",
    "InitSpec",
    "KanConvLayer",
    "PATHS",
    "SHARED_PATHS",
    "expand_basis",
    "gram_activation",
    "gram_basis",
    "init_layer",
    "kan_conv",
    "kan_conv_decoupled",
    "kan_conv_direct",
    "kan_conv_expanded",
    "kan_conv_fused",
    "monomial_basis",
    "resolve_basis",
]
