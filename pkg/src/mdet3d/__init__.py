"""Multi-dataset 3D object detection at desk scale."""

from .datasets import DatasetSpec, Frame, SyntheticDomainConfig
from .geometry import Box3D, PointCloud, Range3D
from .model import Model, ModelConfig
from .training import TrainConfig

__all__ = [
    "Box3D",
    "DatasetSpec",
    "Frame",
    "Model",
    "ModelConfig",
    "PointCloud",
    "Range3D",
    "SyntheticDomainConfig",
    "TrainConfig",
]

__version__ = "0.1.0"
