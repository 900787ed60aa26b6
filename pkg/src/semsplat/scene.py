"""Scene state: isotropic Gaussian splats and the map container.

Each splat carries a 3D position, an isotropic radius, an opacity, an RGB
color, and an S-channel semantic vector constrained to the probability
simplex (one-hot at creation).  The map stores splats as flat arrays so the
renderer and optimizer can operate on contiguous blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .se3 import Pose

SIMPLEX_TOL = 1e-6


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidArgumentError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgumentError("principal point lies outside the image")


@dataclass
class Gaussian:
    """A single isotropic splat; validates the documented parameter ranges."""

    position: np.ndarray
    radius: float
    opacity: float
    color: np.ndarray
    semantic: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.semantic = np.asarray(self.semantic, dtype=np.float64).reshape(-1)
        if not self.radius > 0:
            raise InvalidArgumentError("radius must be positive")
        if not (0.0 <= self.opacity <= 1.0):
            raise InvalidArgumentError("opacity must lie in [0, 1]")
        if np.any(self.color < 0.0) or np.any(self.color > 1.0):
            raise InvalidArgumentError("color channels must lie in [0, 1]")
        if np.any(self.semantic < -SIMPLEX_TOL) or np.any(self.semantic > 1.0 + SIMPLEX_TOL):
            raise InvalidArgumentError("semantic entries must lie in [0, 1]")
        if abs(float(self.semantic.sum()) - 1.0) > SIMPLEX_TOL:
            raise InvalidArgumentError("semantic vector must sum to 1")


@dataclass
class Observation:
    """One RGB-D frame with a label image (0 = background / unlabeled)."""

    rgb: np.ndarray            # (H, W, 3) float in [0, 1]
    depth: np.ndarray          # (H, W) float, 0 marks invalid
    semantic: np.ndarray       # (H, W) integer label ids
    frame_index: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.semantic = np.asarray(self.semantic)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise InvalidArgumentError("rgb must have shape (H, W, 3)")
        if self.depth.shape != self.rgb.shape[:2] or self.semantic.shape != self.rgb.shape[:2]:
            raise InvalidArgumentError("depth / semantic shape does not match rgb")

    @property
    def shape(self):
        return self.depth.shape


class GaussianMap:
    """Flat-array splat storage with a mutation counter.

    ``version`` increments on every parameter write; rendered frames remember
    the version they were produced from so a stale backward pass is rejected.
    Unseen label ids map to the reserved last channel ``semantic_dim - 1``
    when one-hot encoding is needed on ingestion.
    """

    def __init__(self, semantic_dim: int):
        if semantic_dim < 1:
            raise InvalidArgumentError("semantic_dim must be >= 1")
        self.semantic_dim = int(semantic_dim)
        self.positions = np.zeros((0, 3))
        self.radii = np.zeros(0)
        self.opacities = np.zeros(0)
        self.colors = np.zeros((0, 3))
        self.semantics = np.zeros((0, self.semantic_dim))
        self.creation_frame = np.zeros(0, dtype=np.int64)
        self.version = 0

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def size(self) -> int:
        return len(self)

    def add(self, positions, radii, opacities, colors, semantics, frame_index: int = 0):
        """Append a block of splats; arrays are validated then copied in."""
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        n = positions.shape[0]
        radii = np.broadcast_to(np.asarray(radii, dtype=np.float64), (n,))
        opacities = np.broadcast_to(np.asarray(opacities, dtype=np.float64), (n,))
        colors = np.atleast_2d(np.asarray(colors, dtype=np.float64))
        semantics = np.atleast_2d(np.asarray(semantics, dtype=np.float64))
        if positions.shape[1] != 3 or colors.shape != (n, 3):
            raise InvalidArgumentError("positions must be (N, 3) and colors (N, 3)")
        if semantics.shape != (n, self.semantic_dim):
            raise InvalidArgumentError(
                f"semantics must be (N, {self.semantic_dim}), got {semantics.shape}")
        if np.any(radii <= 0):
            raise InvalidArgumentError("radii must be positive")
        if np.any(opacities < 0) or np.any(opacities > 1):
            raise InvalidArgumentError("opacities must lie in [0, 1]")
        if np.any(np.abs(semantics.sum(axis=1) - 1.0) > SIMPLEX_TOL):
            raise InvalidArgumentError("semantic rows must sum to 1")
        self.positions = np.concatenate([self.positions, positions])
        self.radii = np.concatenate([self.radii, radii])
        self.opacities = np.concatenate([self.opacities, opacities])
        self.colors = np.concatenate([self.colors, np.clip(colors, 0.0, 1.0)])
        self.semantics = np.concatenate([self.semantics, semantics])
        self.creation_frame = np.concatenate(
            [self.creation_frame, np.full(n, frame_index, dtype=np.int64)])
        self.version += 1

    def add_gaussian(self, g: Gaussian, frame_index: int = 0):
        self.add(g.position[None], [g.radius], [g.opacity], g.color[None],
                 g.semantic[None], frame_index)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i], float(self.radii[i]), float(self.opacities[i]),
                        self.colors[i], self.semantics[i])

    def keep(self, mask: np.ndarray):
        """Drop splats where ``mask`` is False (used by pruning)."""
        mask = np.asarray(mask, dtype=bool)
        self.positions = self.positions[mask]
        self.radii = self.radii[mask]
        self.opacities = self.opacities[mask]
        self.colors = self.colors[mask]
        self.semantics = self.semantics[mask]
        self.creation_frame = self.creation_frame[mask]
        self.version += 1

    def mark_mutated(self):
        self.version += 1

    def copy(self) -> "GaussianMap":
        out = GaussianMap(self.semantic_dim)
        out.positions = self.positions.copy()
        out.radii = self.radii.copy()
        out.opacities = self.opacities.copy()
        out.colors = self.colors.copy()
        out.semantics = self.semantics.copy()
        out.creation_frame = self.creation_frame.copy()
        return out


def new_map(semantic_dim: int) -> GaussianMap:
    """Create an empty map with a fixed semantic channel count."""
    return GaussianMap(semantic_dim)


def transform_point(pose: Pose, point: np.ndarray) -> np.ndarray:
    """Map a world point into the camera frame of ``pose``."""
    return pose.transform(np.asarray(point, dtype=np.float64).reshape(3))
