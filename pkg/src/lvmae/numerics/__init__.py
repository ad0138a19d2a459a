"""Tensor engine, optimizer, RNG streams and checkpoint I/O."""
from . import checkpoint, rng
from .optim import Adam, AdamState, Schedule, adam_update, lr_at
from .tensor import (
    FlopCounter,
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    apply_op,
    as_tensor,
    backward,
    concat,
    conv3d,
    conv_transpose3d,
    gather,
    gelu,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    softmax,
)

__all__ = [
    "Adam",
    "AdamState",
    "FlopCounter",
    "NonFiniteError",
    "Schedule",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "adam_update",
    "apply_op",
    "as_tensor",
    "backward",
    "checkpoint",
    "concat",
    "conv3d",
    "conv_transpose3d",
    "gather",
    "gelu",
    "layer_norm",
    "linear",
    "log_softmax",
    "lr_at",
    "matmul",
    "rng",
    "softmax",
]
