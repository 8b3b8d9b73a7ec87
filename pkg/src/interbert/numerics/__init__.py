"""Minimal dense-tensor engine with reverse-mode gradients."""

from .gradcheck import finite_diff_check
from .params import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    ParameterSet,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import (
    DEFAULT_DTYPE,
    IGNORE_INDEX,
    NEG_LOGIT,
    NumericsError,
    Tensor,
    add,
    as_tensor,
    backward,
    binary_cross_entropy_logits,
    concat,
    contains_nonfinite,
    cross_entropy_logits,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    mean_all,
    mul,
    narrow,
    no_grad,
    reshape,
    softmax,
    sub,
    sum_all,
    transpose,
)

__all__ = [
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "DEFAULT_DTYPE",
    "IGNORE_INDEX",
    "NEG_LOGIT",
    "NumericsError",
    "ParameterSet",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "binary_cross_entropy_logits",
    "concat",
    "contains_nonfinite",
    "cross_entropy_logits",
    "embedding_lookup",
    "finite_diff_check",
    "gelu",
    "layer_norm",
    "load_checkpoint",
    "matmul",
    "mean_all",
    "mul",
    "narrow",
    "no_grad",
    "reshape",
    "save_checkpoint",
    "softmax",
    "sub",
    "sum_all",
    "transpose",
]
