"""Differentiable front-to-back splat rendering.

Projection model: a splat at camera-frame point (X, Y, Z) lands at pixel
``(fx*X/Z + cx, fy*Y/Z + cy)`` with screen radius ``fx * r / Z``; Z is its
composited depth value.  Per pixel, splats are blended front to back:

    value = sum_i a_i * f_i * prod_{j<i} (1 - f_j)

where ``f_i = opacity * exp(-dist^2 / (2 rho^2))`` is clamped to
[0, WEIGHT_CLAMP] and treated as zero beyond CUTOFF_SIGMA * rho.  The
silhouette channel is the same blend with a_i = 1, equal to one minus the
final transmittance.  Pixels nothing touches stay zero in every channel.

The backward pass returns exact derivatives of a weighted sum of the
rendered channels with respect to every splat parameter and a 6-dof pose
increment ``(wx, wy, wz, tx, ty, tz)`` applied by left composition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidArgumentError, InvalidStateError
from .scene import CameraIntrinsics, Gaussian, GaussianMap
from .se3 import Pose

NEAR_PLANE = 0.01
# Composite until remaining transmittance drops below this.  The truncation
# error is bounded by the threshold times the largest channel value, which
# keeps it far below every documented tolerance.
TRANSMITTANCE_MIN = 1e-8

WEIGHT_CLAMP = kernels.WEIGHT_CLAMP
CUTOFF_SIGMA = kernels.CUTOFF_SIGMA


@dataclass
class ProjectedGaussian:
    center: np.ndarray       # (2,) pixel coordinates
    radius_2d: float
    depth: float
    opacity: float
    visible: bool


@dataclass(repr=False)
class RenderedFrame:
    color: np.ndarray        # (H, W, 3)
    depth: np.ndarray        # (H, W)
    semantic: np.ndarray     # (H, W, S)
    silhouette: np.ndarray   # (H, W), product form 1 - prod(1 - f)
    silhouette_sum: np.ndarray  # (H, W), accumulated-weight form
    _ctx: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.depth.shape

    def __repr__(self):
        h, w = self.depth.shape
        return f"RenderedFrame({h}x{w}, S={self.semantic.shape[2]})"


@dataclass
class ResidualWeights:
    """Per-pixel, per-channel derivatives of a scalar loss w.r.t. the render."""

    color: np.ndarray
    depth: np.ndarray
    semantic: np.ndarray
    silhouette: np.ndarray | None = None

    @classmethod
    def zeros(cls, height: int, width: int, semantic_dim: int) -> "ResidualWeights":
        return cls(np.zeros((height, width, 3)), np.zeros((height, width)),
                   np.zeros((height, width, semantic_dim)))


@dataclass
class GaussianGradients:
    position: np.ndarray     # (N, 3)
    radius: np.ndarray       # (N,)
    opacity: np.ndarray      # (N,)
    color: np.ndarray        # (N, 3)
    semantic: np.ndarray     # (N, S)

    @classmethod
    def zeros(cls, n: int, semantic_dim: int) -> "GaussianGradients":
        return cls(np.zeros((n, 3)), np.zeros(n), np.zeros(n),
                   np.zeros((n, 3)), np.zeros((n, semantic_dim)))


def project_gaussian(g: Gaussian, pose: Pose, intr: CameraIntrinsics) -> ProjectedGaussian:
    """Project one splat; splats behind the near plane or fully off-screen are culled."""
    xcam = pose.transform(g.position)
    z = float(xcam[2])
    if z <= NEAR_PLANE:
        return ProjectedGaussian(np.zeros(2), 0.0, z, g.opacity, False)
    u = intr.fx * xcam[0] / z + intr.cx
    v = intr.fy * xcam[1] / z + intr.cy
    rho = intr.fx * g.radius / z
    cut = CUTOFF_SIGMA * rho
    visible = (u + cut >= 0 and u - cut <= intr.width - 1
               and v + cut >= 0 and v - cut <= intr.height - 1)
    return ProjectedGaussian(np.array([u, v]), rho, z, g.opacity, visible)


def eval_weight(pg: ProjectedGaussian, pixel) -> float:
    """Clamped screen-space weight of a projected splat at one pixel."""
    if not pg.visible:
        return 0.0
    p = np.asarray(pixel, dtype=np.float64)
    d2 = float(np.sum((p - pg.center) ** 2))
    cut = CUTOFF_SIGMA * pg.radius_2d
    if d2 > cut * cut:
        return 0.0
    w = pg.opacity * np.exp(-d2 / (2.0 * pg.radius_2d ** 2))
    return float(min(w, WEIGHT_CLAMP))


def _project_arrays(gmap: GaussianMap, pose: Pose, intr: CameraIntrinsics):
    """Project the whole map; returns depth-sorted arrays of visible splats."""
    rot = pose.rotation_matrix()
    xcam = gmap.positions @ rot.T + pose.translation
    z = xcam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * xcam[:, 0] / z + intr.cx
        v = intr.fy * xcam[:, 1] / z + intr.cy
        rho = intr.fx * gmap.radii / z
    cut = CUTOFF_SIGMA * rho
    vis = ((z > NEAR_PLANE)
           & (u + cut >= 0) & (u - cut <= intr.width - 1)
           & (v + cut >= 0) & (v - cut <= intr.height - 1))
    idx = np.flatnonzero(vis)
    order = np.lexsort((idx, z[idx]))
    idx = idx[order]
    return {
        "index": idx, "rot": rot, "xcam": xcam[idx],
        "u": u[idx], "v": v[idx], "rho": rho[idx], "z": z[idx],
    }


def render(gmap: GaussianMap, pose: Pose, intr: CameraIntrinsics,
           t_min: float = TRANSMITTANCE_MIN) -> RenderedFrame:
    """Composite the map into color / depth / semantic / silhouette images."""
    h, w = intr.height, intr.width
    s_dim = gmap.semantic_dim
    ctx = {"map": gmap, "version": gmap.version, "pose": pose.copy(), "intr": intr}
    if len(gmap) == 0:
        frame = RenderedFrame(np.zeros((h, w, 3)), np.zeros((h, w)),
                              np.zeros((h, w, s_dim)), np.zeros((h, w)),
                              np.zeros((h, w)), ctx)
        ctx["proj"] = None
        return frame
    proj = _project_arrays(gmap, pose, intr)
    idx = proj["index"]
    counts = kernels.count_candidates(proj["u"], proj["v"], proj["rho"], h, w)
    offsets = np.zeros(h * w + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    cand = kernels.fill_candidates(proj["u"], proj["v"], proj["rho"], h, w, offsets)
    color, depth, sem, sil, sil_sum, n_used = kernels.composite_forward(
        offsets, cand, proj["u"], proj["v"], proj["rho"],
        np.ascontiguousarray(gmap.opacities[idx]), proj["z"],
        np.ascontiguousarray(gmap.colors[idx]),
        np.ascontiguousarray(gmap.semantics[idx]), h, w, t_min)
    ctx.update(proj=proj, offsets=offsets, cand=cand, n_used=n_used)
    return RenderedFrame(color, depth, sem, sil, sil_sum, ctx)


def render_backward(frame: RenderedFrame, weights: ResidualWeights):
    """Differentiate ``sum(weights * channels)`` through the retained render.

    Returns per-splat gradients and the 6-dof pose gradient.  Raises if the
    map mutated after the forward pass, since the retained contributor lists
    would no longer describe it.
    """
    ctx = frame._ctx
    gmap: GaussianMap = ctx["map"]
    intr: CameraIntrinsics = ctx["intr"]
    if gmap.version != ctx["version"]:
        raise InvalidStateError("map was mutated after render; re-render before backward")
    h, w = frame.shape
    s_dim = gmap.semantic_dim
    if weights.color.shape != (h, w, 3) or weights.depth.shape != (h, w):
        raise InvalidArgumentError("residual weight shapes do not match the frame")
    if weights.semantic.shape != (h, w, s_dim):
        raise InvalidArgumentError(
            f"semantic weights must have {s_dim} channels, got {weights.semantic.shape}")
    grads = GaussianGradients.zeros(len(gmap), s_dim)
    pose_grad = np.zeros(6)
    if len(gmap) == 0 or ctx["proj"] is None or ctx["cand"].size == 0:
        return grads, pose_grad
    proj = ctx["proj"]
    idx = proj["index"]
    g_sil = weights.silhouette
    if g_sil is None:
        g_sil = np.zeros((h, w))
    gu, gv, grho, gopa, gz, gcol, gsem = kernels.composite_backward(
        ctx["offsets"], ctx["cand"], ctx["n_used"],
        proj["u"], proj["v"], proj["rho"],
        np.ascontiguousarray(gmap.opacities[idx]), proj["z"],
        np.ascontiguousarray(gmap.colors[idx]),
        np.ascontiguousarray(gmap.semantics[idx]), h, w,
        weights.color, weights.depth, weights.semantic, g_sil)

    xcam = proj["xcam"]
    z = proj["z"]
    r = gmap.radii[idx]
    gx = gu * intr.fx / z
    gy = gv * intr.fy / z
    gzc = (-(gu * intr.fx * xcam[:, 0] + gv * intr.fy * xcam[:, 1]
             + grho * intr.fx * r) / (z * z)) + gz
    g_cam = np.stack([gx, gy, gzc], axis=1)

    grads.position[idx] = g_cam @ proj["rot"]
    grads.radius[idx] = grho * intr.fx / z
    grads.opacity[idx] = gopa
    grads.color[idx] = gcol
    grads.semantic[idx] = gsem
    pose_grad[3:] = g_cam.sum(axis=0)
    pose_grad[:3] = np.cross(xcam, g_cam).sum(axis=0)
    return grads, pose_grad


def render_reference(gmap: GaussianMap, pose: Pose, intr: CameraIntrinsics) -> RenderedFrame:
    """Naive full-blend reference: every visible splat against every pixel.

    No candidate lists and no early termination; used as the oracle the fast
    path is checked against.
    """
    h, w = intr.height, intr.width
    s_dim = gmap.semantic_dim
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    sem = np.zeros((h, w, s_dim))
    sil_sum = np.zeros((h, w))
    trans = np.ones((h, w))
    ctx = {"map": gmap, "version": gmap.version, "pose": pose.copy(),
           "intr": intr, "proj": None, "cand": np.zeros(0, dtype=np.int64)}
    if len(gmap) == 0:
        return RenderedFrame(color, depth, sem, np.zeros((h, w)), sil_sum, ctx)
    proj = _project_arrays(gmap, pose, intr)
    idx = proj["index"]
    xs = np.arange(w, dtype=np.float64)[None, :]
    ys = np.arange(h, dtype=np.float64)[:, None]
    for k in range(idx.size):
        dx = xs - proj["u"][k]
        dy = ys - proj["v"][k]
        d2 = dx * dx + dy * dy
        rho = proj["rho"][k]
        f = gmap.opacities[idx[k]] * np.exp(-d2 / (2.0 * rho * rho))
        f = np.minimum(f, WEIGHT_CLAMP)
        f = np.where(d2 <= (CUTOFF_SIGMA * rho) ** 2, f, 0.0)
        wgt = f * trans
        color += gmap.colors[idx[k]][None, None, :] * wgt[:, :, None]
        depth += proj["z"][k] * wgt
        sem += gmap.semantics[idx[k]][None, None, :] * wgt[:, :, None]
        sil_sum += wgt
        trans *= 1.0 - f
    return RenderedFrame(color, depth, sem, 1.0 - trans, sil_sum, ctx)
