"""Heatmap ground truth and the radial loss-weight field.

Segments are traced with a supercover traversal over half-open cells (the
same floor convention as ``world_to_grid``), so every cell containing any
point of a segment is marked.  Marked cells are then dilated with a small
Gaussian kernel, combining overlaps by maximum.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .geometry import NUM_CLASSES, BevGridSpec, Scene, continuous_cell, iter_segments

DEFAULT_KERNEL = 3
DEFAULT_ALPHA_GAUSS = 0.8
DEFAULT_BETA_GAUSS = 8.0
CORNER_EPS = 1e-9


def supercover_cells(p0, p1, spec: BevGridSpec) -> list[tuple[int, int]]:
    """All (row, col) cells touched by the metric segment p0 -> p1, in traversal order.

    Amanatides-Woo stepping; crossing times are recomputed from the start
    point at each boundary rather than accumulated.
    """
    u0, v0 = continuous_cell(p0, spec)
    u1, v1 = continuous_cell(p1, spec)
    du, dv = u1 - u0, v1 - v0
    col, row = math.floor(u0), math.floor(v0)
    end = (math.floor(v1), math.floor(u1))
    su = 1 if du > 0 else -1 if du < 0 else 0
    sv = 1 if dv > 0 else -1 if dv < 0 else 0

    def next_t(idx, start, delta, step):
        if step == 0:
            return math.inf
        boundary = idx + 1 if step > 0 else idx
        return (boundary - start) / delta

    cells = [(row, col)]
    # crossing times this close are one corner crossing; float division by
    # the resolution would otherwise split exact diagonals
    eps = CORNER_EPS
    tu = next_t(col, u0, du, su)
    tv = next_t(row, v0, dv, sv)
    while min(tu, tv) < 1.0 - eps:
        if tu < tv - eps:
            col += su
        elif tv < tu - eps:
            row += sv
        else:
            # exact corner crossing: the corner point itself sits in whichever
            # neighbour lies on the positive side of each axis
            if (su > 0) != (sv > 0):
                cells.append((row, col + su) if su > 0 else (row + sv, col))
            col += su
            row += sv
        cells.append((row, col))
        tu = next_t(col, u0, du, su)
        tv = next_t(row, v0, dv, sv)
    if cells[-1] != end:
        cells.append(end)

    out, seen = [], set()
    for r, c in cells:
        rc = (min(max(r, 0), spec.h - 1), min(max(c, 0), spec.w - 1))
        if rc not in seen:
            seen.add(rc)
            out.append(rc)
    return out


def gaussian_kernel(kernel_size: int, sigma: Optional[float] = None) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd and >= 1, got {kernel_size}")
    sigma = kernel_size / 3.0 if sigma is None else float(sigma)
    r = kernel_size // 2
    d = np.arange(-r, r + 1, dtype=float)
    sq = d[:, None] ** 2 + d[None, :] ** 2
    return np.exp(-sq / (2.0 * sigma * sigma))


def dilate(core: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Max-combine a kernel stamped on every cell of ``core`` (..., H, W)."""
    k = kernel.shape[0]
    r = k // 2
    h, w = core.shape[-2:]
    padded = np.pad(core, [(0, 0)] * (core.ndim - 2) + [(r, r), (r, r)])
    out = np.zeros_like(core, dtype=float)
    for i in range(k):
        for j in range(k):
            # cell (y, x) receives core(y - dy, x - dx) * kernel(dy, dx)
            shifted = padded[..., k - 1 - i: k - 1 - i + h, k - 1 - j: k - 1 - j + w]
            np.maximum(out, shifted * kernel[i, j], out=out)
    return out


def core_mask(scene: Scene, spec: BevGridSpec) -> np.ndarray:
    core = np.zeros((NUM_CLASSES, spec.h, spec.w), dtype=float)
    for inst in scene.instances:
        chan = core[int(inst.cls)]
        for a, b in iter_segments(inst.points, inst.closed):
            for r, c in supercover_cells(a, b, spec):
                chan[r, c] = 1.0
    return core


def rasterize_gt(scene: Scene, spec: BevGridSpec, kernel_size: int = DEFAULT_KERNEL,
                 sigma: Optional[float] = None) -> np.ndarray:
    """C x H x W ground-truth heatmap with 1.0 on traversed cells and Gaussian falloff around them."""
    kernel = gaussian_kernel(kernel_size, sigma)
    return dilate(core_mask(scene, spec), kernel)


def gaussian_weight(dr, dc, h: int, w: int, alpha_gauss: float = DEFAULT_ALPHA_GAUSS,
                    beta_gauss: float = DEFAULT_BETA_GAUSS):
    """Weight at signed offsets (dr, dc), in cells, from the grid center.

    1.0 at the center, rising toward ``1 + alpha_gauss`` far away.
    """
    if alpha_gauss < 0 or beta_gauss <= 0:
        raise ValueError("need alpha_gauss >= 0 and beta_gauss > 0")
    sx, sy = h / beta_gauss, w / beta_gauss
    sq = np.asarray(dr, dtype=float) ** 2 + np.asarray(dc, dtype=float) ** 2
    return (1.0 - np.exp(-sq / (2.0 * sx * sy))) * alpha_gauss + 1.0


def gaussian_weight_field(spec: BevGridSpec, alpha_gauss: float = DEFAULT_ALPHA_GAUSS,
                          beta_gauss: float = DEFAULT_BETA_GAUSS) -> np.ndarray:
    """H x W weights sampled at cell centers, offsets measured from the geometric grid center."""
    dr = np.arange(spec.h) + 0.5 - spec.h / 2.0
    dc = np.arange(spec.w) + 0.5 - spec.w / 2.0
    return gaussian_weight(dr[:, None], dc[None, :], spec.h, spec.w, alpha_gauss, beta_gauss)
