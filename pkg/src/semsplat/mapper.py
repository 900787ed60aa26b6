"""Map growth and refinement against a window of keyframes.

Growth back-projects pixels the map cannot explain yet (low silhouette or a
gross depth error) into new one-pixel splats.  Refinement freezes the poses
and descends the summed per-keyframe tracking loss plus a weighted semantic
consistency term with first-order updates on every splat parameter, keeping
each accepted step loss-decreasing and projecting parameters back to their
valid ranges after every step.  Keyframes for the refinement window are
ranked by how much of the current view's back-projected cloud lands in
voxels the candidate's cloud occupies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset_io import one_hot_encode
from .errors import InvalidArgumentError
from .renderer import NEAR_PLANE, ResidualWeights, render, render_backward
from .scene import CameraIntrinsics, GaussianMap, Observation
from .se3 import Pose
from .semantic_graph import semantic_consistency_loss
from .tracker import TrackingConfig, tracking_residuals

PRUNE_OPACITY = 0.005
RADIUS_FLOOR = 1e-6
REFINE_BACKTRACKS = 8


@dataclass
class MappingConfig:
    top_k: int = 5
    refine_iterations: int = 60
    densify_silhouette_threshold: float = 0.5
    densify_depth_error_factor: float = 50.0
    sc_weight: float = 2.0
    overlap_voxel: float = 0.05

    def __post_init__(self):
        if self.top_k < 1:
            raise InvalidArgumentError("top_k must be at least 1")
        if self.refine_iterations < 0:
            raise InvalidArgumentError("refine_iterations must not be negative")
        if not 0.0 < self.densify_silhouette_threshold < 1.0:
            raise InvalidArgumentError(
                "densify_silhouette_threshold must lie in (0, 1)")
        if self.densify_depth_error_factor <= 0:
            raise InvalidArgumentError(
                "densify_depth_error_factor must be positive")
        if self.sc_weight < 0:
            raise InvalidArgumentError("sc_weight must not be negative")
        if self.overlap_voxel <= 0:
            raise InvalidArgumentError("overlap_voxel must be positive")


@dataclass
class Keyframe:
    frame_index: int
    pose: Pose
    observation: Observation
    point_cloud: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))


def backproject(depth: np.ndarray, pose: Pose, intr: CameraIntrinsics,
                mask: np.ndarray | None = None) -> np.ndarray:
    """World points for the masked pixels of a depth image."""
    if mask is None:
        mask = depth > NEAR_PLANE
    v, u = np.nonzero(mask)
    d = depth[v, u]
    x = (u - intr.cx) / intr.fx * d
    y = (v - intr.cy) / intr.fy * d
    cam = np.stack([x, y, d], axis=1)
    rot = pose.rotation_matrix()
    return (cam - pose.translation) @ rot


def make_keyframe(frame_index: int, pose: Pose, observation: Observation,
                  intr: CameraIntrinsics) -> Keyframe:
    cloud = backproject(observation.depth, pose, intr)
    return Keyframe(frame_index, pose.copy(), observation, cloud)


def _voxel_keys(points: np.ndarray, voxel: float) -> set:
    cells = np.floor(points / voxel).astype(np.int64)
    return set(map(tuple, cells))


def overlap(current: Keyframe, candidate: Keyframe, voxel: float) -> float:
    """Fraction of the current cloud landing in candidate-occupied voxels."""
    if current.point_cloud.shape[0] == 0:
        raise InvalidArgumentError("current keyframe has an empty point cloud")
    if candidate.point_cloud.shape[0] == 0:
        return 0.0
    occupied = _voxel_keys(candidate.point_cloud, voxel)
    cells = np.floor(current.point_cloud / voxel).astype(np.int64)
    hits = sum(tuple(c) in occupied for c in cells)
    return hits / current.point_cloud.shape[0]


def select_keyframes(current: Keyframe, history: list,
                     cfg: MappingConfig) -> list:
    """Current frame plus the best-overlapping history keyframes.

    Ranked by overlap score, ties broken toward the more recent frame.
    ``history`` is expected not to contain the current frame itself.
    """
    scored = [(overlap(current, kf, cfg.overlap_voxel), kf.frame_index, kf)
              for kf in history]
    scored.sort(key=lambda t: (-t[0], -t[1]))
    return [current] + [kf for _s, _i, kf in scored[:cfg.top_k]]


def densify(gmap: GaussianMap, obs: Observation, pose: Pose,
            intr: CameraIntrinsics, cfg: MappingConfig) -> int:
    """Back-project unexplained pixels into new splats; returns the count.

    A pixel triggers when the rendered silhouette is below the threshold or
    its depth error exceeds the factor times the frame's median depth error.
    Triggered pixels are subsampled with stride 2 on both axes, and only
    pixels with an observed depth beyond the near plane ever become splats.
    """
    valid = obs.depth > NEAR_PLANE
    if not valid.any():
        return 0
    rendered = render(gmap, pose, intr)
    err = np.abs(rendered.depth - obs.depth)
    med = float(np.median(err[valid]))
    trigger = (rendered.silhouette < cfg.densify_silhouette_threshold) \
        | (err > cfg.densify_depth_error_factor * max(med, 1e-9))
    pick = np.zeros_like(valid)
    pick[::2, ::2] = True
    chosen = trigger & valid & pick
    count = int(chosen.sum())
    if count == 0:
        return 0
    points = backproject(obs.depth, pose, intr, chosen)
    v, u = np.nonzero(chosen)
    d = obs.depth[v, u]
    labels = np.asarray(obs.semantic)[v, u].astype(np.int64)
    gmap.add(points, d / intr.fx, np.full(count, 0.5), obs.rgb[v, u],
             one_hot_encode(labels, gmap.semantic_dim),
             frame_index=obs.frame_index)
    return count


def _map_objective(gmap, keyframes, sc_frames, intr, cfg, loss_cfg,
                   with_grads):
    """Summed keyframe loss plus weighted consistency loss, with gradients.

    Keyframes are evaluated in ascending frame order so the accumulation
    is deterministic.  Unlike tracking, the loss is ungated: refinement
    must pay for pixels the map fails to cover, or growth could never be
    corrected.
    """
    total = 0.0
    grads = None
    full_gate = np.ones((intr.height, intr.width), dtype=bool)
    for kf in sorted(keyframes, key=lambda k: k.frame_index):
        rendered = render(gmap, kf.pose, intr)
        loss, weights, _count = tracking_residuals(
            rendered, kf.observation, loss_cfg, full_gate)
        total += loss
        if with_grads:
            g, _pose_grad = render_backward(rendered, weights)
            grads = g if grads is None else _accumulate(grads, g)
    for pose, labels in sc_frames:
        rendered = render(gmap, pose, intr)
        sc = semantic_consistency_loss(rendered.semantic, labels)
        total += cfg.sc_weight * sc
        if with_grads and cfg.sc_weight != 0.0:
            target = one_hot_encode(np.asarray(labels), gmap.semantic_dim)
            weights = ResidualWeights.zeros(intr.height, intr.width,
                                            gmap.semantic_dim)
            weights.semantic = cfg.sc_weight * np.sign(
                rendered.semantic - target)
            g, _pose_grad = render_backward(rendered, weights)
            grads = g if grads is None else _accumulate(grads, g)
    return total, grads


def _accumulate(total, extra):
    total.position += extra.position
    total.radius += extra.radius
    total.opacity += extra.opacity
    total.color += extra.color
    total.semantic += extra.semantic
    return total


def _project_params(gmap):
    gmap.opacities = np.clip(gmap.opacities, 0.0, 1.0)
    gmap.colors = np.clip(gmap.colors, 0.0, 1.0)
    gmap.radii = np.maximum(gmap.radii, RADIUS_FLOOR)
    sem = np.maximum(gmap.semantics, 0.0)
    mass = sem.sum(axis=1, keepdims=True)
    flat = mass[:, 0] <= 0.0
    if flat.any():
        sem[flat] = 1.0 / gmap.semantic_dim
        mass[flat] = 1.0
    gmap.semantics = sem / mass
    gmap.mark_mutated()


_REFINE_STEPS = {"position": 2e-3, "radius": 2e-3, "opacity": 0.01,
                 "color": 0.02, "semantic": 0.02}


def refine_map(gmap: GaussianMap, keyframes: list, sc_frames: list,
               intr: CameraIntrinsics, cfg: MappingConfig,
               loss_cfg: TrackingConfig | None = None) -> float:
    """Descend the window objective over all splat parameters; poses frozen.

    ``sc_frames`` pairs a rendering pose with the consistency-updated label
    image it should match; pass an empty list to drop the consistency term.
    Splats whose opacity falls below the prune threshold at the end are
    removed.  Returns the final objective value.
    """
    if not keyframes:
        raise InvalidArgumentError("refine_map needs at least one keyframe")
    loss_cfg = loss_cfg or TrackingConfig()
    names = list(_REFINE_STEPS)
    m = {k: None for k in names}
    v = {k: None for k in names}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    loss, grads = _map_objective(gmap, keyframes, sc_frames, intr, cfg,
                                 loss_cfg, with_grads=True)
    for it in range(1, cfg.refine_iterations + 1):
        if grads is None or len(gmap) == 0:
            break
        gvals = {"position": grads.position, "radius": grads.radius,
                 "opacity": grads.opacity, "color": grads.color,
                 "semantic": grads.semantic}
        direction = {}
        for k in names:
            g = gvals[k]
            m[k] = g * (1 - beta1) if m[k] is None else beta1 * m[k] + (1 - beta1) * g
            v[k] = g**2 * (1 - beta2) if v[k] is None else beta2 * v[k] + (1 - beta2) * g**2
            m_hat = m[k] / (1 - beta1**it)
            v_hat = v[k] / (1 - beta2**it)
            direction[k] = -_REFINE_STEPS[k] * m_hat / (np.sqrt(v_hat) + eps)
        base = gmap.copy()

        def try_direction(step_of):
            scale = 1.0
            for _try in range(REFINE_BACKTRACKS):
                trial = base.copy()
                trial.positions = base.positions + scale * step_of("position")
                trial.radii = base.radii + scale * step_of("radius")
                trial.opacities = base.opacities + scale * step_of("opacity")
                trial.colors = base.colors + scale * step_of("color")
                trial.semantics = base.semantics + scale * step_of("semantic")
                _project_params(trial)
                t_loss, _g = _map_objective(trial, keyframes, sc_frames,
                                            intr, cfg, loss_cfg,
                                            with_grads=False)
                if t_loss < loss:
                    return trial, t_loss
                scale *= 0.5
            return None

        accepted = try_direction(lambda k: direction[k])
        if accepted is None:
            # sign steps suit an L1 objective when the moment direction stalls
            accepted = try_direction(
                lambda k: -_REFINE_STEPS[k] * np.sign(gvals[k]))
        if accepted is None:
            break
        trial, loss = accepted
        _adopt(gmap, trial)
        _loss_again, grads = _map_objective(gmap, keyframes, sc_frames, intr,
                                            cfg, loss_cfg, with_grads=True)
    mask = gmap.opacities >= PRUNE_OPACITY
    if len(gmap) and not mask.all():
        gmap.keep(mask)
        loss, _g = _map_objective(gmap, keyframes, sc_frames, intr, cfg,
                                  loss_cfg, with_grads=False)
    return float(loss)


def _adopt(gmap, trial):
    gmap.positions = trial.positions
    gmap.radii = trial.radii
    gmap.opacities = trial.opacities
    gmap.colors = trial.colors
    gmap.semantics = trial.semantics
    gmap.mark_mutated()
