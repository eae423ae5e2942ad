"""Dense tensor algebra with MAC instrumentation and reverse-mode differentiation."""

from . import ops
from .gradcheck import gradcheck, relative_error
from .ops import (
    MASK_VALUE,
    add,
    broadcast_to,
    concat,
    cross_entropy_with_logits,
    getitem,
    layer_norm,
    masked_fill,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    softmax_lastdim,
    take_rows,
    transpose,
)
from .params import ParamStore, backward
from .tensor import (
    DimensionError,
    MacCounter,
    Tape,
    TapeError,
    Tensor,
    counting_macs,
    finite_checks,
    no_tape,
    recording,
    resolve_dtype,
)

__all__ = [
    "MASK_VALUE", "DimensionError", "MacCounter", "ParamStore", "Tape", "TapeError", "Tensor",
    "add", "backward", "broadcast_to", "concat", "counting_macs", "cross_entropy_with_logits",
    "finite_checks", "getitem", "gradcheck", "layer_norm", "masked_fill", "matmul", "mean",
    "mul", "no_tape", "ops", "recording", "relative_error", "relu", "reshape", "resolve_dtype",
    "scale", "softmax_lastdim", "take_rows", "transpose",
]
