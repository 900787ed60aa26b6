"""Desk-scale semantic RGB-D SLAM on isotropic Gaussian splats."""

__version__ = "0.1.0"

from .errors import (BundleFormatError, InvalidArgumentError, InvalidStateError,
                     SemsplatError, UndefinedMetricError)
from .scene import CameraIntrinsics, Gaussian, GaussianMap, Observation, new_map, transform_point
from .se3 import Pose

__all__ = [
    "BundleFormatError", "CameraIntrinsics", "Gaussian", "GaussianMap",
    "InvalidArgumentError", "InvalidStateError", "Observation", "Pose",
    "SemsplatError", "UndefinedMetricError", "new_map", "transform_point",
]
