"""Minimal dense tensor arithmetic with reverse-mode autodiff."""

from .autodiff import (
    Tensor,
    add,
    backward,
    batchnorm,
    concat_channels,
    conv3d,
    conv3d_transpose,
    dense,
    log,
    maxpool3d,
    mul,
    no_grad,
    trace_patterns,
    relu,
    reshape,
    sigmoid,
    spatial_mean,
    sub,
    tmean,
    tsum,
    upsample3d,
)
from .graph import (
    BatchNorm3dLayer,
    ComputeGraph,
    Conv3dLayer,
    DenseLayer,
    GradCheckReport,
    InitKind,
    InitScheme,
    Mode,
    grad_check,
    init_bound,
    init_weights,
)

__all__ = [
    "Tensor",
    "add",
    "backward",
    "batchnorm",
    "concat_channels",
    "conv3d",
    "conv3d_transpose",
    "dense",
    "log",
    "maxpool3d",
    "mul",
    "no_grad",
    "trace_patterns",
    "relu",
    "reshape",
    "sigmoid",
    "spatial_mean",
    "sub",
    "tmean",
    "tsum",
    "upsample3d",
    "BatchNorm3dLayer",
    "ComputeGraph",
    "Conv3dLayer",
    "DenseLayer",
    "GradCheckReport",
    "InitKind",
    "InitScheme",
    "Mode",
    "grad_check",
    "init_bound",
    "init_weights",
]
