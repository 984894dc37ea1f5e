"""Dense tensors with reverse-mode automatic differentiation."""
from .functional import (
    add,
    clip,
    concat,
    conv2d,
    div,
    exp,
    layer_norm,
    log,
    matmul,
    max_pool2d,
    mean,
    mul,
    neg,
    patchify,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    stack,
    sub,
    sum,
    tanh,
    transpose,
)
from .serialize import FormatError, load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from .tensor import (
    Tape,
    Tensor,
    as_tensor,
    backward,
    debug_mode,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_debug,
    set_default_dtype,
)

__all__ = [
    "Tape", "Tensor", "FormatError", "add", "as_tensor", "backward", "clip", "concat", "conv2d",
    "debug_mode", "default_dtype", "div", "exp", "get_default_dtype", "is_grad_enabled",
    "layer_norm", "load_tensor", "log", "matmul", "max_pool2d", "mean", "mul", "neg", "no_grad", "patchify",
    "power", "relu", "reshape", "save_tensor", "set_debug", "set_default_dtype", "sigmoid",
    "softmax", "sqrt", "stack", "sub", "sum", "tanh", "tensor_from_bytes", "tensor_to_bytes",
    "transpose",
]
