"""Frame-to-map pose tracking.

The camera pose of an incoming frame is found by rendering the current map
and descending a weighted L1 loss over pixels the map can actually explain
(silhouette above a hard gate).  The loss is a sum, not a mean:

    L = sum_px [ w_d |D - D_obs| + w_c sum_rgb |C - C_obs| + w_s sum_ch |S - S_one_hot| ]

with the depth term restricted to pixels carrying a valid observed depth.

Optimization has three stages, each stronger and costlier than the last, so
easy frames stay cheap:

1. Adam on the 6-dof tangent increment with a multiscale line search.  The
   gate is recomputed from the current render each iteration and frozen for
   that iteration's line search, so a step is accepted only if it lowers the
   loss on one consistent pixel set.
2. Gauss-Newton polish on an affine L1 model of the residual stack.  The
   Jacobian comes from central differences, the model is minimized by
   reweighted least squares under a step-norm cap and a damping ladder, and
   every step is validated by a backtracking search on the true loss.  When
   a step fails outright, a small simplex search or a capped model step taken
   uphill hops over the narrow ridges an L1 landscape grows near kinks.
3. Restarts with a jittered initialization when the converged loss stays far
   above the semantic floor the render itself implies (the floor estimates
   the loss a perfect pose would leave behind: soft class edges cannot match
   one-hot labels exactly).  The best pose across restarts wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .dataset_io import one_hot_encode
from .renderer import RenderedFrame, ResidualWeights, render, render_backward
from .scene import GaussianMap, Observation
from .se3 import Pose, apply_increment, relative_pose

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
MAX_BACKTRACKS = 12
FALLBACK_BACKTRACKS = 14
GROWTH_LIMIT = 16.0
LABEL_SILHOUETTE_MIN = 0.5
MODEL_DAMPING_LADDER = (1e-10, 1e-6, 1e-4, 1e-2, 1.0)
SIMPLEX_SPANS = (5e-4, 2e-3, 8e-3)


@dataclass
class TrackingConfig:
    depth_weight: float = 1.0
    color_weight: float = 0.5
    semantic_weight: float = 1.5
    silhouette_gate: float = 0.99
    rotation_step: float = 2e-3
    translation_step: float = 2e-3
    max_iterations: int = 120
    convergence_tol: float = 1e-6
    polish_rounds: int = 16          # Gauss-Newton rounds per polish phase
    polish_phases: int = 6           # polish phases, separated by ridge hops
    polish_step_cap: float = 4e-3    # tangent-norm cap on one model step
    polish_fd_step: float = 2e-4     # central-difference step for the Jacobian
    max_restarts: int = 5
    restart_min_gap: float = 0.5     # absolute loss-above-floor trigger
    restart_gap_fraction: float = 0.002  # relative trigger, fraction of loss

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.rotation_step <= 0 or self.translation_step <= 0:
            raise ValueError("step sizes must be positive")
        if self.polish_rounds < 0 or self.polish_phases < 0:
            raise ValueError("polish budgets must not be negative")
        if self.polish_step_cap <= 0 or self.polish_fd_step <= 0:
            raise ValueError("polish steps must be positive")
        if self.max_restarts < 0:
            raise ValueError("max_restarts must not be negative")


@dataclass
class TrackingResult:
    pose: Pose
    loss: float
    initial_loss: float
    iterations: int
    converged: bool
    degenerate: bool
    gated_pixels: int
    restarts: int = 0


def constant_velocity_init(prev: Pose | None, prev_prev: Pose | None) -> Pose:
    """Extrapolate the last relative motion; falls back to the last pose."""
    if prev is None:
        return Pose.identity()
    if prev_prev is None:
        return prev.copy()
    return relative_pose(prev, prev_prev).compose(prev)


def tracking_residuals(rendered: RenderedFrame, observed: Observation,
                       cfg: TrackingConfig, gate_mask=None):
    """Loss, backward weights, and the gated pixel count for one render.

    Without ``gate_mask`` the gate comes from the render's own silhouette;
    passing a mask freezes the pixel set, which keeps a line search
    comparing candidate poses on one consistent objective.
    """
    if gate_mask is None:
        gated = rendered.silhouette > cfg.silhouette_gate
    else:
        gated = gate_mask
    count = int(gated.sum())
    h, w, s = rendered.semantic.shape
    weights = ResidualWeights.zeros(h, w, s)
    if count == 0:
        return 0.0, weights, 0
    loss = 0.0
    if cfg.depth_weight != 0.0:
        mask = gated & (observed.depth > 0)
        resid = np.where(mask, rendered.depth - observed.depth, 0.0)
        loss += cfg.depth_weight * np.abs(resid).sum()
        weights.depth = cfg.depth_weight * np.sign(resid)
    if cfg.color_weight != 0.0:
        resid = (rendered.color - observed.rgb) * gated[:, :, None]
        loss += cfg.color_weight * np.abs(resid).sum()
        weights.color = cfg.color_weight * np.sign(resid)
    if cfg.semantic_weight != 0.0:
        target = one_hot_encode(observed.semantic, s)
        resid = (rendered.semantic - target) * gated[:, :, None]
        loss += cfg.semantic_weight * np.abs(resid).sum()
        weights.semantic = cfg.semantic_weight * np.sign(resid)
    return float(loss), weights, count


def semantic_floor(rendered: RenderedFrame, cfg: TrackingConfig) -> float:
    """Loss a perfect pose would still pay on this view.

    At the true pose the depth and color residuals of an exact map vanish,
    but the rendered class simplex keeps soft edges that one-hot labels can
    never match, so the semantic term keeps a floor.  Comparing the achieved
    loss against the floor of the achieved render tells converged apart from
    stuck without knowing the true pose.
    """
    if cfg.semantic_weight == 0.0:
        return 0.0
    gated = rendered.silhouette > cfg.silhouette_gate
    if not gated.any():
        return 0.0
    s = rendered.semantic.shape[2]
    labels = np.where(rendered.silhouette > LABEL_SILHOUETTE_MIN,
                      np.argmax(rendered.semantic[:, :, 1:], axis=2) + 1, 0)
    target = one_hot_encode(labels, s)
    resid = (rendered.semantic - target) * gated[:, :, None]
    return float(cfg.semantic_weight * np.abs(resid).sum())


def _line_search(gmap, intrinsics, observed, cfg, pose, delta, gate, loss,
                 max_halvings=MAX_BACKTRACKS):
    """Multiscale search along ``delta``: grow while improving, else halve.

    Returns ``(pose, rendered, loss)`` for the best improving candidate, or
    ``None`` when no tested scale lowers the loss on the frozen gate.
    """
    best = None
    best_loss = loss
    scale = 1.0
    halvings = 0
    while True:
        candidate = apply_increment(scale * delta, pose)
        rendered = render(gmap, candidate, intrinsics)
        c_loss, _w, _c = tracking_residuals(rendered, observed, cfg, gate)
        if c_loss < best_loss:
            best_loss = c_loss
            best = (candidate, rendered, c_loss)
            if scale >= 1.0:
                scale *= 2.0
                if scale > GROWTH_LIMIT:
                    break
            else:
                break
        else:
            if scale > 1.0:
                break
            scale /= 2.0
            halvings += 1
            if halvings > max_halvings:
                break
    return best


def _descend(gmap, observed, intrinsics, cfg, pose):
    """Adam stage: re-gate each iteration, line-search every step."""
    rendered = render(gmap, pose, intrinsics)
    step_scale = np.array([cfg.rotation_step] * 3 + [cfg.translation_step] * 3)
    m = np.zeros(6)
    v = np.zeros(6)
    adam_it = 0
    iterations = 0
    converged = False
    loss = None
    for it in range(1, cfg.max_iterations + 1):
        iterations = it
        gate = rendered.silhouette > cfg.silhouette_gate
        if not gate.any():
            break
        loss, weights, _count = tracking_residuals(rendered, observed, cfg, gate)
        _splat_grad, pose_grad = render_backward(rendered, weights)
        adam_it += 1
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * pose_grad
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * pose_grad**2
        m_hat = m / (1.0 - ADAM_BETA1**adam_it)
        v_hat = v / (1.0 - ADAM_BETA2**adam_it)
        delta = -step_scale * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        hit = _line_search(gmap, intrinsics, observed, cfg, pose, delta,
                           gate, loss)
        if hit is None:
            # Adam's moment direction can point across the valley; retry
            # along the raw gradient, and reset the moments if that lands
            norm = float(np.linalg.norm(pose_grad))
            if norm > 0.0:
                delta = -(pose_grad / norm) * cfg.rotation_step
                hit = _line_search(gmap, intrinsics, observed, cfg, pose,
                                   delta, gate, loss,
                                   max_halvings=FALLBACK_BACKTRACKS)
            if hit is not None:
                m[:] = 0.0
                v[:] = 0.0
                adam_it = 0
        if hit is None:
            converged = True
            break
        drop = loss - hit[2]
        pose, rendered, loss = hit
        if drop <= cfg.convergence_tol * max(1.0, loss):
            converged = True
            break
    return pose, rendered, loss, iterations, converged


def _residual_stack(rendered, observed, cfg, gate, target):
    """Weighted per-pixel residuals flattened into one vector."""
    gate3 = gate[:, :, None]
    depth_mask = gate & (observed.depth > 0)
    return np.concatenate([
        ((rendered.depth - observed.depth) * depth_mask).ravel()
        * cfg.depth_weight,
        ((rendered.color - observed.rgb) * gate3).ravel() * cfg.color_weight,
        ((rendered.semantic - target) * gate3).ravel() * cfg.semantic_weight,
    ])


def _model_step(J, r0, damping):
    """Minimize sum |r0 + J^T xi| by reweighted least squares on the model."""
    xi = np.zeros(6)
    for _ in range(30):
        model = r0 + xi @ J
        w = 1.0 / np.maximum(np.abs(model), 1e-8)
        H = (J * w) @ J.T
        b = (J * w) @ r0
        H += np.eye(6) * (damping * max(np.trace(H), 1e-12))
        try:
            xi_new = np.linalg.solve(H, -b)
        except np.linalg.LinAlgError:
            return xi
        if np.linalg.norm(xi_new - xi) < 1e-12:
            return xi_new
        xi = xi_new
    return xi


def _polish_phase(gmap, observed, intrinsics, cfg, pose):
    """One run of Gauss-Newton rounds on the affine L1 residual model.

    Returns ``(pose, status, kick)``: status is ``converged`` when the step
    shrank to nothing, ``failed`` when no damped step lowered the true loss
    (``kick`` then holds the capped model step for a ridge hop), or
    ``budget`` when the round limit ran out mid-descent.
    """
    s = gmap.semantic_dim
    target = one_hot_encode(observed.semantic, s)
    h = cfg.polish_fd_step
    for _round in range(cfg.polish_rounds):
        rendered = render(gmap, pose, intrinsics)
        gate = rendered.silhouette > cfg.silhouette_gate
        if not gate.any():
            return pose, "converged", None
        loss, _w, _c = tracking_residuals(rendered, observed, cfg, gate)
        r0 = _residual_stack(rendered, observed, cfg, gate, target)
        J = np.zeros((6, r0.size))
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            plus = _residual_stack(
                render(gmap, apply_increment(d, pose), intrinsics),
                observed, cfg, gate, target)
            minus = _residual_stack(
                render(gmap, apply_increment(-d, pose), intrinsics),
                observed, cfg, gate, target)
            J[k] = (plus - minus) / (2.0 * h)
        hit = None
        moved = 0.0
        kick = None
        for damping in MODEL_DAMPING_LADDER:
            xi = _model_step(J, r0, damping)
            norm = float(np.linalg.norm(xi))
            if norm < 1e-12:
                continue
            if norm > cfg.polish_step_cap:
                xi = xi * (cfg.polish_step_cap / norm)
            if kick is None:
                kick = xi.copy()
            scale = 1.0
            for _halve in range(4):
                candidate = apply_increment(scale * xi, pose)
                c_rendered = render(gmap, candidate, intrinsics)
                c_loss, _w2, _c2 = tracking_residuals(
                    c_rendered, observed, cfg, gate)
                if c_loss < loss:
                    hit = candidate
                    moved = float(np.linalg.norm(scale * xi))
                    break
                scale *= 0.5
            if hit is not None:
                break
        if hit is None:
            return pose, "failed", kick
        pose = hit
        if moved < 1e-9:
            return pose, "converged", None
    return pose, "budget", None


def _simplex_polish(gmap, observed, intrinsics, cfg, pose, span, max_evals=120):
    """Nelder-Mead on the tangent around ``pose`` with the gate frozen."""
    rendered = render(gmap, pose, intrinsics)
    gate = rendered.silhouette > cfg.silhouette_gate
    if not gate.any():
        return pose

    def objective(xi):
        candidate = render(gmap, apply_increment(xi, pose), intrinsics)
        c_loss, _w, _c = tracking_residuals(candidate, observed, cfg, gate)
        return c_loss

    x0 = np.zeros(6)
    simplex = np.vstack([x0] + [x0 + span * np.eye(6)[k] for k in range(6)])
    res = minimize(objective, x0, method="Nelder-Mead",
                   options=dict(maxfev=max_evals, xatol=1e-8, fatol=1e-10,
                                initial_simplex=simplex))
    return apply_increment(res.x, pose)


def _evaluate(gmap, observed, intrinsics, cfg, pose):
    """Loss on the pose's own gate, plus the render for reuse."""
    rendered = render(gmap, pose, intrinsics)
    gate = rendered.silhouette > cfg.silhouette_gate
    loss, _w, _c = tracking_residuals(rendered, observed, cfg, gate)
    return loss, rendered


def _track_pass(gmap, observed, intrinsics, cfg, init_pose, rng):
    """One full descent + polish pass; returns the best pose it saw."""
    pose, _rendered, _loss, iterations, converged = _descend(
        gmap, observed, intrinsics, cfg, init_pose)
    best_loss, best_rendered = _evaluate(gmap, observed, intrinsics, cfg, pose)
    best_pose = pose
    status, kick = None, None
    for phase in range(cfg.polish_phases):
        if phase > 0:
            if status == "failed" and kick is not None:
                # hop over the ridge: take the capped model step uphill, with
                # a direction jitter once straight hops have failed twice
                jitter = rng.standard_normal(6)
                jitter *= 0.5 * np.linalg.norm(kick) / np.linalg.norm(jitter)
                pose = apply_increment(
                    kick + (jitter if phase >= 3 else 0.0), pose)
            else:
                span = SIMPLEX_SPANS[(phase - 1) % len(SIMPLEX_SPANS)]
                pose = _simplex_polish(gmap, observed, intrinsics, cfg, pose,
                                       span)
        pose, status, kick = _polish_phase(gmap, observed, intrinsics, cfg,
                                           pose)
        loss, rendered = _evaluate(gmap, observed, intrinsics, cfg, pose)
        if loss < best_loss:
            best_loss, best_pose, best_rendered = loss, pose, rendered
        if status == "converged":
            converged = True
            break
        gap = best_loss - semantic_floor(best_rendered, cfg)
        if gap <= max(cfg.restart_min_gap,
                      cfg.restart_gap_fraction * best_loss):
            converged = True
            break
    return best_pose, best_loss, best_rendered, iterations, converged


def track_frame(gmap: GaussianMap, observed: Observation, init_pose: Pose,
                intrinsics, cfg: TrackingConfig | None = None) -> TrackingResult:
    cfg = cfg or TrackingConfig()
    pose = init_pose.copy()
    rendered = render(gmap, pose, intrinsics)
    gate = rendered.silhouette > cfg.silhouette_gate
    initial_loss, _weights, count = tracking_residuals(
        rendered, observed, cfg, gate)
    if count == 0:
        return TrackingResult(pose, initial_loss, initial_loss, 0, False,
                              True, 0)
    rng = np.random.default_rng(814 + observed.frame_index)
    best_pose, best_loss, best_rendered, iterations, converged = _track_pass(
        gmap, observed, intrinsics, cfg, pose, rng)
    restarts = 0
    for _attempt in range(cfg.max_restarts):
        gap = best_loss - semantic_floor(best_rendered, cfg)
        if gap <= max(cfg.restart_min_gap,
                      cfg.restart_gap_fraction * best_loss):
            break
        restarts += 1
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        tdir = rng.standard_normal(3)
        tdir /= np.linalg.norm(tdir)
        jitter = np.concatenate([axis * np.radians(1.0), tdir * 0.02])
        retry_pose, retry_loss, retry_rendered, _its, retry_conv = _track_pass(
            gmap, observed, intrinsics, cfg,
            apply_increment(jitter, best_pose), rng)
        if retry_loss < best_loss:
            best_pose, best_loss, best_rendered = (
                retry_pose, retry_loss, retry_rendered)
            converged = converged or retry_conv
    gated = int((best_rendered.silhouette > cfg.silhouette_gate).sum())
    return TrackingResult(best_pose, best_loss, initial_loss, iterations,
                          converged, False, gated, restarts)
