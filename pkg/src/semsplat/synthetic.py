"""Synthetic orbit sequences rendered from a layered ground-truth map.

The generator builds a desk-like scene and flies a camera orbit around it,
rendering color / depth / labels with the package renderer, so a pipeline run
against the bundle has an exactly attainable ground truth.  The scene is
layered with pose tracking in mind:

* a tilted backdrop of large opaque splats that covers the whole frustum in
  every orbit frame, so the tracked silhouette gate never sees a boundary;
* mid-depth "texture" splats and near-depth "boulder" splats in the backdrop
  class, whose parallax against the backdrop pins down the rotation and
  translation pairs a single plane cannot distinguish;
* one small high-opacity splat per remaining class floating in front, whose
  sharp class edges no rigid-motion ambiguity can reproduce.

Per-frame mask descriptors are unit vectors near a per-class anchor; anchors
are sampled with pairwise |cos| < 0.5 so same-class descriptors stay well
above any cross-class similarity.

``label_flip_rate`` corrupts a fraction of per-frame masks: the record label
and the label image region get a wrong class, while the descriptor keeps
pointing at the true anchor.  Clean labels are kept in ``gt_semantics``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset_io import FeatureRecord, SequenceBundle, rle_encode
from .errors import InvalidArgumentError
from .renderer import render
from .scene import CameraIntrinsics, GaussianMap, Observation, new_map
from .se3 import look_at

SILHOUETTE_LABEL_MIN = 0.5
ANCHOR_COS_MAX = 0.5


@dataclass
class SynthConfig:
    seed: int = 42
    gaussian_count: int = 50
    frame_count: int = 20
    width: int = 64
    height: int = 64
    focal: float = 70.0
    orbit_radius: float = 2.0
    orbit_height: float = 0.3
    orbit_degrees_per_frame: float = 1.5
    class_count: int = 6
    label_flip_rate: float = 0.0
    feature_noise: float = 0.02
    feature_dim: int = 16

    def __post_init__(self):
        if self.gaussian_count < 1:
            raise InvalidArgumentError("gaussian_count must be at least 1")
        if self.frame_count < 1:
            raise InvalidArgumentError("frame_count must be at least 1")
        if self.width < 8 or self.height < 8:
            raise InvalidArgumentError("resolution must be at least 8x8")
        if self.orbit_radius <= 0:
            raise InvalidArgumentError("orbit_radius must be positive")
        if self.class_count < 1:
            raise InvalidArgumentError("class_count must be at least 1")
        if not 0.0 <= self.label_flip_rate <= 1.0:
            raise InvalidArgumentError("label_flip_rate must be in [0, 1]")
        if self.feature_dim < 2:
            raise InvalidArgumentError("feature_dim must be at least 2")
        if self.focal <= 0:
            raise InvalidArgumentError("focal must be positive")


def _sample_anchors(rng, count: int, dim: int) -> np.ndarray:
    anchors = []
    for _ in range(count):
        for _attempt in range(1000):
            v = rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            if all(abs(v @ a) < ANCHOR_COS_MAX for a in anchors):
                anchors.append(v)
                break
        else:
            raise InvalidArgumentError(
                f"cannot place {count} separated anchors in {dim} dimensions")
    return np.stack(anchors)


def _noisy_descriptor(rng, anchor: np.ndarray, noise: float) -> np.ndarray:
    direction = rng.standard_normal(anchor.shape[0])
    direction /= np.linalg.norm(direction)
    v = anchor + noise * direction
    return v / np.linalg.norm(v)


def orbit_pose(cfg: SynthConfig, frame_index: int):
    """World-to-camera pose of the orbit at the given frame."""
    theta = np.radians(frame_index * cfg.orbit_degrees_per_frame)
    center = np.array([cfg.orbit_radius * np.sin(theta),
                       cfg.orbit_height,
                       -cfg.orbit_radius * np.cos(theta)])
    return look_at(center, np.zeros(3))


def _object_centers(rng, count: int) -> list:
    """Object centers in front of the backdrop, kept apart in the image."""
    centers = []
    for _ in range(count):
        best = None
        best_gap = -1.0
        for _attempt in range(400):
            p = rng.uniform(-0.32, 0.32, 3) * np.array([1.0, 1.0, 0.5])
            gap = min((np.linalg.norm((p - q)[:2]) for q in centers),
                      default=np.inf)
            if gap >= 0.3:
                best = p
                break
            if gap > best_gap:
                best_gap, best = gap, p
        centers.append(best)
    return centers


def _backdrop_depth(x: float, y: float) -> float:
    """Depth of the tilted backdrop plane at a world (x, y)."""
    return 0.64 + 0.18 * (x / 1.9) + 0.12 * (y / 1.55)


def _ground_truth_map(rng, cfg: SynthConfig, palette: np.ndarray) -> GaussianMap:
    n, c = cfg.gaussian_count, cfg.class_count
    gmap = new_map(c + 1)
    wall_cls = c
    # clamp the backdrop base color away from the clip range so the texture
    # and boulder contrast offsets below survive intact
    base = np.clip(palette[wall_cls - 1], 0.3, 0.7)
    one_hot = np.eye(c + 1)

    # split the splat budget: backdrop grid, boulders, objects, texture
    n_obj = min(c - 1, max(0, n - 1))
    remaining = n - n_obj
    n_wall = min(12, remaining)
    remaining -= n_wall
    n_bld = min(6, remaining)
    n_tex = remaining - n_bld

    # backdrop: 4x3 grid of big overlapping splats on a tilted plane, wide
    # enough that every orbit pose sees it across the whole image
    grid = [(x, y) for y in np.linspace(-1.55, 1.55, 3)
            for x in np.linspace(-1.9, 1.9, 4)]
    for (gx, gy) in grid[:n_wall]:
        col = np.clip(base + rng.uniform(-0.2, 0.2, 3), 0.02, 0.98)
        gmap.add(np.array([gx, gy, _backdrop_depth(gx, gy)]), 1.15,
                 rng.uniform(0.96, 0.995), col, one_hot[wall_cls])

    # texture layer: contrasting splats a little in front of the backdrop,
    # same class so their motion carries parallax without class edges
    for i in range(n_tex):
        tx, ty = rng.uniform(-1.5, 1.5), rng.uniform(-1.2, 1.2)
        tz = _backdrop_depth(tx, ty) - rng.uniform(0.10, 0.30)
        sign = 1.0 if i % 2 == 0 else -1.0
        col = np.clip(base + sign * 0.42 + rng.uniform(-0.1, 0.1, 3),
                      0.02, 0.98)
        gmap.add(np.array([tx, ty, tz]), rng.uniform(0.12, 0.18),
                 rng.uniform(0.8, 0.95), col, one_hot[wall_cls])

    # boulder layer: bigger splats clearly in front of the texture band,
    # spread across the view for a strong parallax baseline
    bxs = np.linspace(-0.75, 0.75, max(n_bld, 1))
    for i in range(n_bld):
        bx = bxs[i] + rng.uniform(-0.05, 0.05)
        by = (-1.0) ** i * 0.45 + rng.uniform(-0.15, 0.15)
        bz = _backdrop_depth(bx, by) - rng.uniform(0.42, 0.56)
        sign = 1.0 if i % 2 == 0 else -1.0
        col = np.clip(base + sign * 0.35 + rng.uniform(-0.12, 0.12, 3),
                      0.02, 0.98)
        gmap.add(np.array([bx, by, bz]), rng.uniform(0.20, 0.28),
                 rng.uniform(0.85, 0.97), col, one_hot[wall_cls])

    # foreground objects: one small, nearly solid splat per remaining class
    centers = _object_centers(rng, n_obj)
    for k in range(n_obj):
        cls = k + 1
        col = np.clip(palette[cls - 1] + rng.uniform(-0.15, 0.15, 3),
                      0.02, 0.98)
        gmap.add(centers[k] + rng.normal(0.0, 0.02, 3),
                 rng.uniform(0.06, 0.09), rng.uniform(0.97, 0.995),
                 col, one_hot[cls])
    return gmap


def generate_synthetic(cfg: SynthConfig) -> SequenceBundle:
    rng = np.random.default_rng(cfg.seed)
    c = cfg.class_count
    palette = rng.uniform(0.15, 0.95, (c, 3))
    gmap = _ground_truth_map(rng, cfg, palette)
    anchors = _sample_anchors(rng, c, cfg.feature_dim)
    intr = CameraIntrinsics(cfg.focal, cfg.focal,
                            (cfg.width - 1) / 2.0, (cfg.height - 1) / 2.0,
                            cfg.width, cfg.height)
    frames = []
    features = []
    gt_semantics = []
    poses = []
    for i in range(cfg.frame_count):
        pose = orbit_pose(cfg, i)
        poses.append(pose)
        rendered = render(gmap, pose, intr)
        footprint = rendered.silhouette > SILHOUETTE_LABEL_MIN
        labels = np.where(
            footprint, np.argmax(rendered.semantic[:, :, 1:], axis=2) + 1, 0)
        clean = labels.copy()
        records = []
        observed = labels.copy()
        for cls in range(1, c + 1):
            mask = clean == cls
            if not mask.any():
                continue
            descriptor = _noisy_descriptor(rng, anchors[cls - 1], cfg.feature_noise)
            written = cls
            if cfg.label_flip_rate > 0 and rng.uniform() < cfg.label_flip_rate and c > 1:
                shift = int(rng.integers(1, c))
                written = (cls - 1 + shift) % c + 1
                observed[mask] = written
            records.append(FeatureRecord(mask_id=len(records), label=written,
                                         embedding=descriptor, rle=rle_encode(mask)))
        frames.append(Observation(rendered.color, rendered.depth, observed,
                                  frame_index=i, timestamp=i / 30.0))
        features.append(records)
        gt_semantics.append(clean)
    bundle = SequenceBundle(
        intrinsics=intr, frames=frames, features=features,
        semantic_dim=c + 1, feature_dim=cfg.feature_dim,
        label_names=["background"] + [f"class_{k}" for k in range(1, c + 1)],
        gt_poses=poses, gt_semantics=gt_semantics, has_semantics=True)
    bundle.gt_map = gmap
    return bundle
