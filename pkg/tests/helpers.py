"""Shared scene builders and oracles for the test suite."""

import numpy as np

from semsplat.renderer import (CUTOFF_SIGMA, TRANSMITTANCE_MIN, WEIGHT_CLAMP,
                               ResidualWeights, render, render_backward)
from semsplat.scene import CameraIntrinsics, new_map
from semsplat.se3 import Pose, apply_increment


def small_intrinsics(size=16, focal=20.0):
    return CameraIntrinsics(focal, focal, (size - 1) / 2.0, (size - 1) / 2.0, size, size)


def random_scene(seed, n_max=10, size=16, s_dim=4, conditioned=True):
    """Random splat map + camera.

    With ``conditioned`` the sampler rejects configurations where a finite
    difference step could cross a non-smooth point of the renderer (the
    hard support cutoff, the weight clamp, or the termination threshold),
    retrying with a derived seed until the scene is safe to difference.
    """
    attempt = 0
    while True:
        rng = np.random.default_rng(seed * 1009 + attempt)
        n = int(rng.integers(4, n_max + 1))
        gmap = new_map(s_dim)
        sem = np.zeros((n, s_dim))
        sem[np.arange(n), rng.integers(0, s_dim, n)] = 1.0
        gmap.add(rng.uniform(-0.5, 0.5, (n, 3)),
                 rng.uniform(0.05, 0.14, n),
                 rng.uniform(0.3, 0.8, n),
                 rng.uniform(0.05, 0.95, (n, 3)),
                 sem)
        intr = small_intrinsics(size)
        pose = Pose(translation=[0.0, 0.0, 1.8])
        if not conditioned or _fd_safe(gmap, pose, intr):
            return gmap, pose, intr
        attempt += 1


def _fd_safe(gmap, pose, intr, margin=2e-3):
    xcam = pose.transform(gmap.positions)
    z = xcam[:, 2]
    if np.any(z < 0.5):
        return False
    u = intr.fx * xcam[:, 0] / z + intr.cx
    v = intr.fy * xcam[:, 1] / z + intr.cy
    rho = intr.fx * gmap.radii / z
    xs = np.arange(intr.width, dtype=np.float64)
    ys = np.arange(intr.height, dtype=np.float64)
    dist = np.sqrt((xs[None, :, None] - u) ** 2 + (ys[:, None, None] - v) ** 2)
    if np.any(np.abs(dist - CUTOFF_SIGMA * rho) < margin):
        return False
    frame = render(gmap, pose, intr)
    trans = 1.0 - frame.silhouette
    if trans.min() < 10.0 * TRANSMITTANCE_MIN:
        return False
    # keep every weight clear of the clamp
    f_max = gmap.opacities[None, None, :] * np.exp(-dist ** 2 / (2 * rho ** 2))
    return f_max.max() < 0.99 * WEIGHT_CLAMP


def random_weights(rng, height, width, s_dim, with_silhouette=True):
    return ResidualWeights(
        rng.normal(size=(height, width, 3)),
        rng.normal(size=(height, width)),
        rng.normal(size=(height, width, s_dim)),
        rng.normal(size=(height, width)) if with_silhouette else None)


def weighted_sum(frame, weights):
    total = (weights.color * frame.color).sum() + (weights.depth * frame.depth).sum()
    total += (weights.semantic * frame.semantic).sum()
    if weights.silhouette is not None:
        total += (weights.silhouette * frame.silhouette).sum()
    return total


def gradient_max_violation(seed, step=1e-5, size=16, s_dim=4):
    """Run one full finite-difference sweep; returns the worst tolerance ratio.

    The tolerance is max(1e-4 * |fd|, 1e-7); a return value <= 1 passes.
    """
    gmap, pose, intr = random_scene(seed, size=size, s_dim=s_dim)
    rng = np.random.default_rng(seed + 77)
    weights = random_weights(rng, intr.height, intr.width, s_dim)
    frame = render(gmap, pose, intr)
    grads, pose_grad = render_backward(frame, weights)

    def loss(m, p):
        return weighted_sum(render(m, p, intr), weights)

    worst = 0.0

    def check(analytic, plus, minus):
        # ratio of |analytic - fd| to the allowed max(1e-4 * |fd|, 1e-7)
        nonlocal worst
        fd = (plus - minus) / (2.0 * step)
        worst = max(worst, abs(analytic - fd) / max(abs(fd) * 1e-4, 1e-7))

    for i in range(len(gmap)):
        for d in range(3):
            mp = gmap.copy(); mp.positions[i, d] += step
            mm = gmap.copy(); mm.positions[i, d] -= step
            check(grads.position[i, d], loss(mp, pose), loss(mm, pose))
        mp = gmap.copy(); mp.radii[i] += step
        mm = gmap.copy(); mm.radii[i] -= step
        check(grads.radius[i], loss(mp, pose), loss(mm, pose))
        mp = gmap.copy(); mp.opacities[i] += step
        mm = gmap.copy(); mm.opacities[i] -= step
        check(grads.opacity[i], loss(mp, pose), loss(mm, pose))
        for d in range(3):
            mp = gmap.copy(); mp.colors[i, d] += step
            mm = gmap.copy(); mm.colors[i, d] -= step
            check(grads.color[i, d], loss(mp, pose), loss(mm, pose))
        for d in range(s_dim):
            mp = gmap.copy(); mp.semantics[i, d] += step
            mm = gmap.copy(); mm.semantics[i, d] -= step
            check(grads.semantic[i, d], loss(mp, pose), loss(mm, pose))
    for d in range(6):
        delta = np.zeros(6)
        delta[d] = step
        plus = loss(gmap, apply_increment(delta, pose))
        minus = loss(gmap, apply_increment(-delta, pose))
        check(pose_grad[d], plus, minus)
    return worst
