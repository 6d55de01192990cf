"""Numeric substrate: dense arrays, reverse-mode autodiff, Adam, NDT1 files."""

from .array import (
    NdError,
    ShapeError,
    load_ndt,
    read_ndt,
    require_finite,
    save_ndt,
    write_ndt,
)
from .tape import (
    Tensor,
    add,
    backprop,
    concat_channels,
    constant,
    conv2d,
    conv2d_nhwc,
    cross_entropy,
    detach,
    exp,
    global_avg_pool,
    group_norm,
    group_norm_nhwc,
    matmul,
    mean,
    mul,
    neg,
    param,
    permute,
    reshape,
    self_attention,
    self_attention_nhwc,
    sigmoid,
    silu,
    sub,
    sum_all,
    timestep_embedding,
    upsample_nearest2x,
)
from .optim import Adam, OptimError

__all__ = [
    "Adam",
    "NdError",
    "OptimError",
    "ShapeError",
    "Tensor",
    "add",
    "backprop",
    "concat_channels",
    "constant",
    "conv2d",
    "conv2d_nhwc",
    "cross_entropy",
    "detach",
    "exp",
    "global_avg_pool",
    "group_norm",
    "group_norm_nhwc",
    "load_ndt",
    "matmul",
    "mean",
    "mul",
    "neg",
    "param",
    "permute",
    "read_ndt",
    "require_finite",
    "reshape",
    "save_ndt",
    "self_attention",
    "self_attention_nhwc",
    "sigmoid",
    "silu",
    "sub",
    "sum_all",
    "timestep_embedding",
    "upsample_nearest2x",
    "write_ndt",
]
