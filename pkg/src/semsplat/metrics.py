"""Evaluation metrics: trajectory error, image fidelity, label agreement.

Trajectory error rigidly aligns the estimate to the reference (closed-form
least squares over the positions, rotation + translation, no scale) before
taking the RMSE, so the reported value is invariant to the arbitrary world
frame the SLAM run anchored itself in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, UndefinedMetricError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def align_rigid(source: np.ndarray, target: np.ndarray):
    """Least-squares rotation + translation taking source points onto target."""
    src_mean = source.mean(axis=0)
    tgt_mean = target.mean(axis=0)
    cov = (source - src_mean).T @ (target - tgt_mean)
    u, _, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, sign]) @ u.T
    return rot, tgt_mean - rot @ src_mean


def _check_trajectories(estimated, ground_truth):
    est = np.asarray(estimated, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    if est.ndim != 2 or est.shape[1] != 3 or gt.ndim != 2 or gt.shape[1] != 3:
        raise InvalidArgumentError("trajectories must be (N, 3) position arrays")
    if est.shape[0] != gt.shape[0]:
        raise InvalidArgumentError(
            f"trajectory lengths differ: estimated {est.shape[0]} vs reference {gt.shape[0]}")
    if est.shape[0] < 2:
        raise InvalidArgumentError("trajectories must contain at least 2 poses")
    return est, gt


def ate_residuals(estimated, ground_truth) -> np.ndarray:
    """Per-pose translational error after rigid alignment."""
    est, gt = _check_trajectories(estimated, ground_truth)
    rot, t = align_rigid(est, gt)
    aligned = est @ rot.T + t
    return np.linalg.norm(aligned - gt, axis=1)


def ate_rmse(estimated, ground_truth) -> float:
    res = ate_residuals(estimated, ground_truth)
    return float(np.sqrt(np.mean(res * res)))


def psnr(a: np.ndarray, b: np.ndarray, max_value: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(max_value * max_value / mse), PSNR_CAP))


def _window_kernel():
    half = SSIM_WINDOW // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k1 = np.exp(-xs * xs / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    kernel = np.outer(k1, k1)
    return kernel / kernel.sum()


def _windowed_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(img, kernel.shape)
    return np.einsum("ijkl,kl->ij", windows, kernel)


def _ssim_single(a, b, max_value):
    kernel = _window_kernel()
    c1 = (0.01 * max_value) ** 2
    c2 = (0.03 * max_value) ** 2
    mu_a = _windowed_mean(a, kernel)
    mu_b = _windowed_mean(b, kernel)
    var_a = _windowed_mean(a * a, kernel) - mu_a * mu_a
    var_b = _windowed_mean(b * b, kernel) - mu_b * mu_b
    cov = _windowed_mean(a * b, kernel) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, max_value: float = 1.0) -> float:
    """Mean structural similarity over all fully-contained 11x11 windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([_ssim_single(a[..., c], b[..., c], max_value)
                              for c in range(a.shape[2])]))
    if a.ndim != 2:
        raise InvalidArgumentError("ssim expects (H, W) or (H, W, C) images")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise InvalidArgumentError(
            f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for ssim")
    return _ssim_single(a, b, max_value)


def depth_l1(rendered: np.ndarray, observed: np.ndarray) -> float:
    """Mean absolute depth difference over pixels with valid observed depth."""
    rendered = np.asarray(rendered, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if rendered.shape != observed.shape:
        raise InvalidArgumentError(f"depth shapes differ: {rendered.shape} vs {observed.shape}")
    valid = observed > 0
    if not valid.any():
        raise UndefinedMetricError("no valid depth pixels to compare")
    return float(np.mean(np.abs(rendered[valid] - observed[valid])))


def seg_l1(labels_a: np.ndarray, labels_b: np.ndarray) -> float:
    """Twice the label disagreement rate (the L1 distance between one-hots)."""
    labels_a = np.asarray(labels_a)
    labels_b = np.asarray(labels_b)
    if labels_a.shape != labels_b.shape:
        raise InvalidArgumentError(f"label shapes differ: {labels_a.shape} vs {labels_b.shape}")
    return float(2.0 * np.mean(labels_a != labels_b))


@dataclass
class MetricsReport:
    ate_rmse: float = float("nan")
    psnr: float = float("nan")
    ssim: float = float("nan")
    depth_l1: float = float("nan")
    seg_l1: float = float("nan")
    per_frame: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ate_rmse": self.ate_rmse,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "depth_l1": self.depth_l1,
            "seg_l1": self.seg_l1,
            "lpips": None,
            "per_frame": self.per_frame,
        }

    def table(self) -> str:
        rows = [("ate_rmse", f"{self.ate_rmse:.6f}"),
                ("psnr", f"{self.psnr:.4f}"),
                ("ssim", f"{self.ssim:.6f}"),
                ("depth_l1", f"{self.depth_l1:.6f}"),
                ("seg_l1", f"{self.seg_l1:.6f}"),
                ("lpips", "n/a")]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)
