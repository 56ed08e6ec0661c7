from . import ops
from .gradcheck import check_gradients, numeric_grad, relative_error
from .ops import (
    add,
    astype,
    batch_norm2d,
    concat,
    conv2d,
    dropout,
    einsum,
    elementwise,
    getitem,
    linear,
    mean,
    mul,
    neg,
    pad2d,
    pool2d,
    reshape,
    scale,
    silu,
    softmax_cross_entropy,
    stack,
    sub,
    tanh,
    transpose,
)
from .tensor import Parameter, TapeNode, Tensor, as_tensor, backward, is_grad_enabled, no_grad, set_debug

__all__ = [
    "Parameter",
    "astype",
    "TapeNode",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "batch_norm2d",
    "check_gradients",
    "concat",
    "conv2d",
    "dropout",
    "einsum",
    "elementwise",
    "getitem",
    "is_grad_enabled",
    "linear",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "numeric_grad",
    "ops",
    "pad2d",
    "pool2d",
    "relative_error",
    "reshape",
    "scale",
    "set_debug",
    "silu",
    "softmax_cross_entropy",
    "stack",
    "sub",
    "tanh",
    "transpose",
]
