from .tensor import Parameter, Tensor, as_tensor, backward, build_tape, grad_enabled, no_grad
from .ops import (
    BatchNormState,
    absolute,
    add,
    batch_norm,
    bilinear_upsample,
    concat,
    concat_channels,
    conv1d,
    conv2d,
    div,
    elementwise,
    exp,
    getitem,
    global_avg_pool,
    log,
    maxpool2x2,
    mean,
    mul,
    reduce_extreme,
    relu,
    reshape,
    sigmoid,
    softmax,
    square,
    stack,
    sub,
    tanh,
    transpose,
    window_unfold,
)
from .ops import sum as tsum

__all__ = [
    "BatchNormState", "Parameter", "Tensor", "absolute", "add", "as_tensor", "backward",
    "batch_norm", "bilinear_upsample", "build_tape", "concat", "concat_channels", "conv1d",
    "conv2d", "div", "elementwise", "exp", "getitem", "global_avg_pool", "grad_enabled", "log",
    "maxpool2x2", "mean", "mul", "no_grad", "reduce_extreme", "relu", "reshape", "sigmoid",
    "softmax", "square", "stack", "sub", "tanh", "transpose", "tsum", "window_unfold",
]
