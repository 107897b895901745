from .tensor import (
    ComputationTape,
    Tensor,
    activation,
    broadcast_mul,
    concat,
    exp,
    hardswish,
    l2norm,
    log,
    maximum,
    mean,
    no_grad,
    relu,
    sigmoid,
    softmax,
    sqrt,
    stack,
    tabs,
)
from .functional import conv1d, conv3d, linear, maxpool_spatial, pool_blocks, same_padding

__all__ = [
    "ComputationTape", "Tensor", "activation", "broadcast_mul", "concat", "conv1d",
    "conv3d", "exp", "hardswish", "l2norm", "linear", "log", "maximum", "maxpool_spatial", "mean",
    "no_grad", "pool_blocks", "relu", "same_padding", "sigmoid", "softmax", "sqrt",
    "stack", "tabs",
]
