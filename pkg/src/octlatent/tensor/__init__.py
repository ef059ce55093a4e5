"""Sparse tensors, generalized sparse convolution, autodiff and Adam."""

from .autograd import GraphError, Tensor, no_grad, parameter
from .layers import Conv, Down, IRNBlock, Up
from .params import (
    CheckpointError,
    ParamStore,
    adam_step,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from .sparse import (
    CUBE_OFFSETS,
    Coords,
    KernelWeights,
    SparseTensor,
    cat,
    downsample_conv,
    kernel_offsets,
    sparse_conv,
    upsample_conv,
)

__all__ = [
    "CUBE_OFFSETS",
    "CheckpointError",
    "Conv",
    "Coords",
    "Down",
    "GraphError",
    "IRNBlock",
    "KernelWeights",
    "ParamStore",
    "SparseTensor",
    "Tensor",
    "Up",
    "adam_step",
    "cat",
    "checkpoint_bytes",
    "downsample_conv",
    "kernel_offsets",
    "load_checkpoint",
    "no_grad",
    "parameter",
    "parse_checkpoint",
    "save_checkpoint",
    "sparse_conv",
    "upsample_conv",
]
