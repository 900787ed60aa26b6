"""Vectorized numpy fallback for the compositing kernels.

Matches the JIT kernels' semantics (candidate order, clamping, early
termination) but builds padded per-pixel matrices instead of looping, so it
needs no compiler.  Accumulation order differs from the sequential kernels
only in the last few floating-point bits.
"""

import numpy as np

WEIGHT_CLAMP = 0.9999
CUTOFF_SIGMA = 3.0


def _candidate_pairs(u, v, rho, height, width):
    """(pixel, gaussian) pairs within the cutoff radius, gaussian-major order."""
    pix_parts = []
    g_parts = []
    for g in range(u.shape[0]):
        cut = CUTOFF_SIGMA * rho[g]
        x0 = max(int(np.floor(u[g] - cut)), 0)
        x1 = min(int(np.ceil(u[g] + cut)), width - 1)
        y0 = max(int(np.floor(v[g] - cut)), 0)
        y1 = min(int(np.ceil(v[g] + cut)), height - 1)
        if x0 > x1 or y0 > y1:
            continue
        xs = np.arange(x0, x1 + 1)
        ys = np.arange(y0, y1 + 1)
        dx = xs[None, :] - u[g]
        dy = ys[:, None] - v[g]
        inside = dx * dx + dy * dy <= cut * cut
        yy, xx = np.nonzero(inside)
        pix_parts.append((yy + y0) * width + (xx + x0))
        g_parts.append(np.full(yy.size, g, dtype=np.int64))
    if not pix_parts:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(pix_parts), np.concatenate(g_parts)


def count_candidates(u, v, rho, height, width):
    pix, _ = _candidate_pairs(u, v, rho, height, width)
    return np.bincount(pix, minlength=height * width).astype(np.int64)


def fill_candidates(u, v, rho, height, width, offsets):
    pix, g = _candidate_pairs(u, v, rho, height, width)
    order = np.argsort(pix, kind="stable")
    return g[order]


def _geometry(offsets, cand, u, v, rho, opa, height, width):
    """Per-candidate pixel coords, squared distance, and clamped weight."""
    counts = np.diff(offsets)
    pix = np.repeat(np.arange(height * width), counts)
    rank = np.arange(cand.size) - np.repeat(offsets[:-1], counts)
    px = (pix % width).astype(np.float64)
    py = (pix // width).astype(np.float64)
    dx = px - u[cand]
    dy = py - v[cand]
    d2 = dx * dx + dy * dy
    e = np.exp(-d2 / (2.0 * rho[cand] * rho[cand]))
    f_raw = opa[cand] * e
    f = np.minimum(f_raw, WEIGHT_CLAMP)
    return counts, pix, rank, dx, dy, d2, e, f_raw, f


def _transmittance(f_pad):
    """Per-slot transmittance before each candidate (shifted running product)."""
    t_pad = np.ones_like(f_pad)
    if f_pad.shape[1] > 1:
        np.cumprod(1.0 - f_pad[:, :-1], axis=1, out=t_pad[:, 1:])
    return t_pad


def _segment_suffix(contrib, pix, offsets, n_pix):
    """Exclusive per-pixel suffix sums of a candidate-aligned flat array."""
    csum = np.cumsum(contrib)
    base = np.concatenate(([0.0], csum))[offsets[:-1]]
    inclusive_prefix = csum - base[pix]
    totals = np.bincount(pix, weights=contrib, minlength=n_pix)
    return totals[pix] - inclusive_prefix


def composite_forward(offsets, cand, u, v, rho, opa, z, col, sem, height, width, t_min):
    n_sem = sem.shape[1]
    n_pix = height * width
    color = np.zeros((n_pix, 3))
    depth = np.zeros(n_pix)
    sem_img = np.zeros((n_pix, n_sem))
    sil_sum = np.zeros(n_pix)
    if cand.size == 0:
        return (color.reshape(height, width, 3), depth.reshape(height, width),
                sem_img.reshape(height, width, n_sem), np.zeros((height, width)),
                np.zeros((height, width)), np.zeros(n_pix, dtype=np.int64))
    counts, pix, rank, _, _, _, _, _, f = _geometry(
        offsets, cand, u, v, rho, opa, height, width)
    kmax = max(int(counts.max()), 1)
    f_pad = np.zeros((n_pix, kmax))
    f_pad[pix, rank] = f
    t_prev = _transmittance(f_pad)[pix, rank]
    processed = t_prev >= t_min
    n_used = np.bincount(pix[processed], minlength=n_pix).astype(np.int64)
    w = np.where(processed, f * t_prev, 0.0)
    np.add.at(color, pix, col[cand] * w[:, None])
    np.add.at(depth, pix, z[cand] * w)
    np.add.at(sem_img, pix, sem[cand] * w[:, None])
    np.add.at(sil_sum, pix, w)
    f_pad[pix, rank] = np.where(processed, f, 0.0)
    sil = 1.0 - np.prod(1.0 - f_pad, axis=1)
    return (color.reshape(height, width, 3), depth.reshape(height, width),
            sem_img.reshape(height, width, n_sem), sil.reshape(height, width),
            sil_sum.reshape(height, width), n_used)


def composite_backward(offsets, cand, n_used, u, v, rho, opa, z, col, sem,
                       height, width, g_col, g_dep, g_sem, g_sil):
    n_sem = sem.shape[1]
    n_gauss = u.shape[0]
    gu = np.zeros(n_gauss)
    gv = np.zeros(n_gauss)
    grho = np.zeros(n_gauss)
    gopa = np.zeros(n_gauss)
    gz = np.zeros(n_gauss)
    gcol = np.zeros((n_gauss, 3))
    gsem = np.zeros((n_gauss, n_sem))
    if cand.size == 0:
        return gu, gv, grho, gopa, gz, gcol, gsem
    n_pix = height * width
    counts, pix, rank, dx, dy, d2, e, f_raw, f = _geometry(
        offsets, cand, u, v, rho, opa, height, width)
    # replicate the forward prefix: candidates at rank >= n_used were skipped
    processed = rank < n_used[pix]
    f_used = np.where(processed, f, 0.0)
    kmax = max(int(counts.max()), 1)
    f_pad = np.zeros((n_pix, kmax))
    f_pad[pix, rank] = f_used
    t_prev = _transmittance(f_pad)[pix, rank]
    w = f_used * t_prev
    one_mf = 1.0 - f
    gcol_flat = g_col.reshape(n_pix, 3)[pix]
    gdep_flat = g_dep.reshape(n_pix)[pix]
    gsem_flat = g_sem.reshape(n_pix, n_sem)[pix]
    gsil_flat = g_sil.reshape(n_pix)[pix]

    dldf = np.zeros(cand.size)
    for c in range(3):
        suf = _segment_suffix(col[cand, c] * w, pix, offsets, n_pix)
        dldf += gcol_flat[:, c] * (col[cand, c] * t_prev - suf / one_mf)
    suf = _segment_suffix(z[cand] * w, pix, offsets, n_pix)
    dldf += gdep_flat * (z[cand] * t_prev - suf / one_mf)
    suf = _segment_suffix(w, pix, offsets, n_pix)
    dldf += gsil_flat * (t_prev - suf / one_mf)
    for s in range(n_sem):
        suf = _segment_suffix(sem[cand, s] * w, pix, offsets, n_pix)
        dldf += gsem_flat[:, s] * (sem[cand, s] * t_prev - suf / one_mf)
    dldf = np.where(processed, dldf, 0.0)

    np.add.at(gcol, cand, gcol_flat * w[:, None])
    np.add.at(gz, cand, gdep_flat * w)
    np.add.at(gsem, cand, gsem_flat * w[:, None])
    live = processed & (f_raw <= WEIGHT_CLAMP)
    rho2 = rho[cand] * rho[cand]
    np.add.at(gopa, cand, np.where(live, dldf * e, 0.0))
    np.add.at(gu, cand, np.where(live, dldf * f * dx / rho2, 0.0))
    np.add.at(gv, cand, np.where(live, dldf * f * dy / rho2, 0.0))
    np.add.at(grho, cand, np.where(live, dldf * f * d2 / (rho2 * rho[cand]), 0.0))
    return gu, gv, grho, gopa, gz, gcol, gsem


def warmup():
    """No compilation needed; present for backend interface parity."""
