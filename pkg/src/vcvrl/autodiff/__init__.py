"""Minimal reverse-mode autodiff over numpy arrays."""

from .gradcheck import gradcheck, numerical_grad, relative_error
from .ops import (
    ShapeError,
    bce_loss,
    concat_channels,
    conv3d,
    cosine_similarity,
    interpolation_matrix,
    linear,
    maxpool3d,
    relu,
    sigmoid,
    take_rows,
    upsample_trilinear,
)
from .optim import Adam, AdamState, adam_step
from .tensor import (
    Tensor,
    add,
    count_ops,
    detach,
    is_grad_enabled,
    mul,
    no_grad,
    permute,
    reshape,
    tensor,
    tensor_mean as mean,
    tensor_sum as sum,
)

__all__ = [
    "Adam",
    "AdamState",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "bce_loss",
    "concat_channels",
    "conv3d",
    "cosine_similarity",
    "count_ops",
    "detach",
    "gradcheck",
    "interpolation_matrix",
    "is_grad_enabled",
    "linear",
    "maxpool3d",
    "mean",
    "mul",
    "no_grad",
    "numerical_grad",
    "permute",
    "relative_error",
    "relu",
    "reshape",
    "sigmoid",
    "sum",
    "take_rows",
    "tensor",
    "upsample_trilinear",
]
