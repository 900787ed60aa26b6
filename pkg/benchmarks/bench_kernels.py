"""Timing comparison of the two compositing kernel backends.

Renders the same scenes through the JIT (numba) and vectorized (numpy)
kernels by swapping the backend functions in place, timing the forward
composite and the forward+backward pair end to end through the renderer.

Run from the repository root:

    python benchmarks/bench_kernels.py
"""

import time

import numpy as np

import semsplat.kernels as kernels
from semsplat.kernels import get_backend
from semsplat.renderer import ResidualWeights, render, render_backward
from semsplat.scene import CameraIntrinsics, new_map

_SWAPPED = ("count_candidates", "fill_candidates", "composite_forward",
            "composite_backward", "warmup")


def _use(module):
    for name in _SWAPPED:
        setattr(kernels, name, getattr(module, name))


def _scene(n_gaussians, seed=7, s_dim=5):
    rng = np.random.default_rng(seed)
    gmap = new_map(s_dim)
    positions = rng.uniform(-1.0, 1.0, (n_gaussians, 3))
    positions[:, 2] = rng.uniform(1.5, 3.5, n_gaussians)
    sem = rng.uniform(0.05, 1.0, (n_gaussians, s_dim))
    sem /= sem.sum(axis=1, keepdims=True)
    gmap.add(positions, rng.uniform(0.03, 0.15, n_gaussians),
             rng.uniform(0.3, 0.95, n_gaussians),
             rng.uniform(0.0, 1.0, (n_gaussians, 3)), sem)
    return gmap


def _time(fn, reps):
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    from semsplat.se3 import Pose

    intr = CameraIntrinsics(70.0, 70.0, 32.0, 32.0, 64, 64)
    pose = Pose.identity()
    sizes = (50, 200, 800)
    reps = 15
    backends = ["numpy"] + (["numba"] if kernels.HAS_NUMBA else [])
    results = {}
    for name in backends:
        module = get_backend(name)
        _use(module)
        module.warmup()
        for n in sizes:
            gmap = _scene(n)
            render(gmap, pose, intr)  # pay any one-time compile cost here
            fwd = _time(lambda: render(gmap, pose, intr), reps)

            def both():
                frame = render(gmap, pose, intr)
                weights = ResidualWeights(
                    np.sign(frame.color - 0.5), np.sign(frame.depth - 2.0),
                    np.sign(frame.semantic - 0.2))
                render_backward(frame, weights)

            results[(name, n)] = (fwd, _time(both, reps))
    _use(get_backend(kernels.BACKEND))

    print(f"{'splats':>7} {'forward numpy':>14} {'forward numba':>14} "
          f"{'fwd ratio':>10} {'fwd+bwd numpy':>14} {'fwd+bwd numba':>14} "
          f"{'pair ratio':>11}")
    for n in sizes:
        np_fwd, np_both = results[("numpy", n)]
        if ("numba", n) in results:
            nb_fwd, nb_both = results[("numba", n)]
            print(f"{n:>7} {np_fwd * 1e3:>12.2f}ms {nb_fwd * 1e3:>12.2f}ms "
                  f"{np_fwd / nb_fwd:>9.1f}x {np_both * 1e3:>12.2f}ms "
                  f"{nb_both * 1e3:>12.2f}ms {np_both / nb_both:>10.1f}x")
        else:
            print(f"{n:>7} {np_fwd * 1e3:>12.2f}ms {'n/a':>14} {'n/a':>10} "
                  f"{np_both * 1e3:>12.2f}ms {'n/a':>14} {'n/a':>11}")


if __name__ == "__main__":
    main()
