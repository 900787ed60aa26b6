"""Sequential SLAM loop over an RGB-D(+labels) stream.

Each frame is processed in a fixed order: initialize the pose by constant
velocity, track it against the current map, grow the map where the frame is
unexplained, reconcile mask labels across the recent window through the
consistency graph, and periodically refine the map over the best-overlapping
keyframes with the consistency term attached.  Two switches carve out the
ablation variants: ``semantic_enabled`` removes the semantic loss channel
entirely, and ``consistency_enabled`` keeps the channel but drops the graph
relabeling and the consistency term in refinement.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset_io import SequenceBundle
from .errors import InvalidArgumentError
from .mapper import (Keyframe, MappingConfig, densify, make_keyframe,
                     refine_map, select_keyframes)
from .metrics import MetricsReport, ate_rmse, depth_l1, psnr, seg_l1, ssim
from .renderer import RenderedFrame, render
from .scene import GaussianMap, Observation, new_map
from .se3 import Pose
from .semantic_graph import (SCORE_PRUNE_THRESHOLD, SIMILARITY_TAU,
                             TEMPORAL_WINDOW, build_graph, cluster,
                             nodes_from_features, relabel_frames,
                             semantic_consistency_loss)
from .tracker import (LABEL_SILHOUETTE_MIN, TrackingConfig,
                      constant_velocity_init, track_frame)

log = logging.getLogger(__name__)


@dataclass
class GraphConfig:
    tau: float = SIMILARITY_TAU
    window: int = TEMPORAL_WINDOW
    cluster_threshold: float = SCORE_PRUNE_THRESHOLD

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise InvalidArgumentError("tau must lie in (0, 1]")
        if self.window < 1:
            raise InvalidArgumentError("window must be at least 1")
        if not 0.0 <= self.cluster_threshold <= 1.0:
            raise InvalidArgumentError("cluster_threshold must lie in [0, 1]")


def _slam_tracking_defaults() -> TrackingConfig:
    # the certificate-gated restarts and the deep polish ladder pay off when
    # observations render exactly from the map (relocalization against a
    # trusted map); against a map still being built the loss floor is model
    # error, not pose error, so restarts would burn time chasing it
    return TrackingConfig(polish_phases=1, max_restarts=0)


@dataclass
class PipelineConfig:
    tracking: TrackingConfig = field(default_factory=_slam_tracking_defaults)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    keyframe_every: int = 5
    semantic_enabled: bool = True
    consistency_enabled: bool = True

    def __post_init__(self):
        if self.keyframe_every < 1:
            raise InvalidArgumentError("keyframe_every must be at least 1")


@dataclass
class PipelineState:
    map: GaussianMap
    trajectory: list = field(default_factory=list)
    keyframes: list = field(default_factory=list)
    graph_window: list = field(default_factory=list)
    updated_semantics: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    frame_cursor: int = 0


def new_state(semantic_dim: int) -> PipelineState:
    return PipelineState(map=new_map(semantic_dim))


def labels_from_render(frame: RenderedFrame) -> np.ndarray:
    """Label image of a render: argmax over object channels where covered."""
    return np.where(frame.silhouette > LABEL_SILHOUETTE_MIN,
                    np.argmax(frame.semantic[:, :, 1:], axis=2) + 1, 0)


def _tracking_config(cfg: PipelineConfig) -> TrackingConfig:
    if cfg.semantic_enabled:
        return cfg.tracking
    return replace(cfg.tracking, semantic_weight=0.0)


def _reconcile_window(state: PipelineState, features, cfg: PipelineConfig):
    """Fold the frame's mask records into the graph and relabel the window."""
    i = state.frame_cursor
    if features:
        state.graph_window.extend(nodes_from_features([features],
                                                      frame_indices=[i]))
    state.graph_window = [n for n in state.graph_window
                          if n.frame_index >= i - cfg.graph.window]
    if not state.graph_window:
        return 0
    graph = build_graph(state.graph_window, cfg.graph.window, cfg.graph.tau)
    result = cluster(graph, cfg.graph.cluster_threshold)
    frames = sorted({n.frame_index for n in state.graph_window})
    images = {fi: state.updated_semantics[fi] for fi in frames}
    updated, assignments = relabel_frames(graph, result, images)
    for fi, img in updated.items():
        state.updated_semantics[fi] = img
    for node_idx, _old, new_label in assignments:
        graph.nodes[node_idx].label = new_label
    return len(assignments)


def _window_sc_frames(state: PipelineState, cfg: PipelineConfig) -> list:
    lo = max(0, state.frame_cursor - cfg.graph.window)
    return [(state.trajectory[fi], state.updated_semantics[fi])
            for fi in range(lo, state.frame_cursor + 1)]


def _relabeled_keyframes(state: PipelineState, selected: list) -> list:
    """Selected keyframes with their label images swapped for the relabeled
    versions, so refinement and the consistency term pull the same way."""
    patched = []
    for kf in selected:
        labels = state.updated_semantics[kf.frame_index]
        obs = kf.observation
        if np.array_equal(labels, obs.semantic):
            patched.append(kf)
            continue
        swapped = Observation(obs.rgb, obs.depth, labels,
                              frame_index=obs.frame_index,
                              timestamp=obs.timestamp)
        patched.append(Keyframe(kf.frame_index, kf.pose, swapped,
                                kf.point_cloud))
    return patched


def process_frame(state: PipelineState, obs: Observation, intr,
                  cfg: PipelineConfig, features: list | None = None,
                  anchor: Pose | None = None) -> dict:
    """Advance the pipeline by one frame; returns the per-frame report.

    ``features`` carries the frame's mask records for the consistency graph;
    ``anchor`` fixes the very first pose (identity when omitted).
    """
    i = state.frame_cursor
    track_cfg = _tracking_config(cfg)
    report = {"frame": i, "tracking_loss": None, "iterations": 0,
              "converged": True, "degenerate": False, "restarts": 0,
              "densified": 0, "relabeled": 0, "refined": False,
              "l_opt": None, "l_sc": None, "keyframe_ids": []}
    if i == 0:
        pose = (anchor or Pose.identity()).copy()
    else:
        init = constant_velocity_init(
            state.trajectory[-1],
            state.trajectory[-2] if i >= 2 else None)
        tracked = track_frame(state.map, obs, init, intr, track_cfg)
        if tracked.degenerate:
            log.warning("frame %d: no silhouette overlap with the map; "
                        "keeping the initialized pose", i)
        pose = tracked.pose
        report.update(tracking_loss=tracked.loss,
                      iterations=tracked.iterations,
                      converged=tracked.converged,
                      degenerate=tracked.degenerate,
                      restarts=tracked.restarts)
    state.trajectory.append(pose)
    state.updated_semantics.append(np.asarray(obs.semantic).copy())
    report["densified"] = densify(state.map, obs, pose, intr, cfg.mapping)
    if cfg.semantic_enabled and cfg.consistency_enabled:
        report["relabeled"] = _reconcile_window(state, features, cfg)
    if i % cfg.keyframe_every == 0:
        current = make_keyframe(i, pose, obs, intr)
        selected = select_keyframes(current, state.keyframes, cfg.mapping)
        state.keyframes.append(current)
        sc_frames = []
        if cfg.semantic_enabled and cfg.consistency_enabled:
            sc_frames = _window_sc_frames(state, cfg)
            selected = _relabeled_keyframes(state, selected)
        report["l_opt"] = refine_map(state.map, selected, sc_frames, intr,
                                     cfg.mapping, loss_cfg=track_cfg)
        report["l_sc"] = sum(
            semantic_consistency_loss(render(state.map, p, intr).semantic, lab)
            for p, lab in sc_frames)
        report["refined"] = True
        report["keyframe_ids"] = [kf.frame_index for kf in selected]
    report["gaussian_count"] = len(state.map)
    state.reports.append(report)
    state.frame_cursor += 1
    return report


def sequence_metrics(state: PipelineState, bundle: SequenceBundle) -> MetricsReport:
    """Render the final map along the trajectory and score it per frame."""
    per_frame = []
    for i, obs in enumerate(bundle.frames):
        frame = render(state.map, state.trajectory[i], bundle.intrinsics)
        ref = (bundle.gt_semantics[i] if bundle.gt_semantics is not None
               else obs.semantic)
        per_frame.append({
            "frame": i,
            "psnr": psnr(frame.color, obs.rgb),
            "ssim": ssim(frame.color, obs.rgb),
            "depth_l1": depth_l1(frame.depth, obs.depth),
            "seg_l1": seg_l1(labels_from_render(frame), ref),
        })
    report = MetricsReport(per_frame=per_frame)
    report.psnr = float(np.mean([f["psnr"] for f in per_frame]))
    report.ssim = float(np.mean([f["ssim"] for f in per_frame]))
    report.depth_l1 = float(np.mean([f["depth_l1"] for f in per_frame]))
    report.seg_l1 = float(np.mean([f["seg_l1"] for f in per_frame]))
    if bundle.gt_poses is not None and len(bundle.gt_poses) >= 2:
        est = np.stack([p.camera_center() for p in state.trajectory])
        gt = np.stack([p.camera_center() for p in bundle.gt_poses])
        report.ate_rmse = ate_rmse(est, gt)
    return report


def run_sequence(bundle: SequenceBundle,
                 cfg: PipelineConfig | None = None) -> tuple:
    """Fold the per-frame loop over a bundle; returns (state, metrics).

    The first pose anchors to the bundle's first ground-truth pose when one
    is available (trajectory error metrics are alignment-invariant, so this
    only removes the arbitrary gauge), identity otherwise.
    """
    cfg = cfg or PipelineConfig()
    state = new_state(bundle.semantic_dim)
    anchor = bundle.gt_poses[0] if bundle.gt_poses else Pose.identity()
    for i, obs in enumerate(bundle.frames):
        features = None
        if cfg.semantic_enabled and cfg.consistency_enabled and bundle.features:
            if i < len(bundle.features):
                features = bundle.features[i]
        process_frame(state, obs, bundle.intrinsics, cfg,
                      features=features, anchor=anchor)
    return state, sequence_metrics(state, bundle)
