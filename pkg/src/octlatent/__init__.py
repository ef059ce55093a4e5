"""Octree geometry codec with a multiscale latent-guided entropy model."""

from .errors import ChecksumMismatch, CodecError, CorruptStreamError, ValidationError
from .model import LatentModel, ModelConfig
from .octree import build_octree, octree_to_voxels
from .pcio import PointCloud, dequantize, load_points, quantize
from .pipeline import (
    CompressedFrame,
    bit_breakdown,
    compress,
    decompress,
    load_model,
    save_model,
    visualize_features,
)

__all__ = [
    "ChecksumMismatch",
    "CodecError",
    "CompressedFrame",
    "CorruptStreamError",
    "LatentModel",
    "ModelConfig",
    "PointCloud",
    "ValidationError",
    "bit_breakdown",
    "build_octree",
    "compress",
    "decompress",
    "dequantize",
    "load_model",
    "load_points",
    "octree_to_voxels",
    "quantize",
    "save_model",
    "visualize_features",
]
