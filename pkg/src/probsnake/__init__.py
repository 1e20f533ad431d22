"""Probability-map guided level-set segmentation of contrast-enhanced volumes."""
from .errors import ProbSnakeError
from .volcore import BinaryMask, Volume, VoxelRegion, read_mask, read_volume, write_mask, write_volume

__version__ = "0.1.0"

__all__ = [
    "ProbSnakeError",
    "Volume",
    "BinaryMask",
    "VoxelRegion",
    "read_volume",
    "write_volume",
    "read_mask",
    "write_mask",
]
