"""Proposal refinement for 3D detection over sparse voxel feature maps.

The library voxelizes point clouds into multi-scale sparse feature maps,
pools voxel features around each proposal box with an attention module
operating in the box's canonical frame, and regresses refined boxes with
confidence targets tied to box overlap.  Everything runs on a small
float64 autodiff core; no GPU or deep-learning framework is involved.
"""

from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

__all__ = ["Tensor", "ShapeError", "ContractError", "ConfigError", "__version__"]

__version__ = "0.1.0"
