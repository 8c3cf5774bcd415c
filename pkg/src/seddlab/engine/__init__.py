from .tensor import (
    EngineError,
    Tape,
    Tensor,
    add,
    add_const,
    clip_global_norm,
    embedding,
    exp,
    gelu,
    global_grad_norm,
    layer_norm,
    log,
    log_softmax,
    masked_fill,
    matmul,
    modulate,
    mul,
    mul_const,
    no_grad,
    parameter,
    record,
    reshape,
    rope,
    scale,
    softmax,
    sub,
    take_last,
    tmean,
    transpose,
    tsum,
)
from .optim import OptimState, optimizer_step

__all__ = [
    "EngineError", "Tape", "Tensor", "add", "add_const", "clip_global_norm",
    "embedding", "exp", "gelu", "global_grad_norm", "layer_norm", "log",
    "log_softmax", "masked_fill", "matmul", "modulate", "mul", "mul_const",
    "no_grad", "parameter", "record", "reshape", "rope", "scale", "softmax",
    "sub", "take_last", "tmean", "transpose", "tsum",
    "OptimState", "optimizer_step",
]
