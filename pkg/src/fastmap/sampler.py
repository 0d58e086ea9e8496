"""Geometric prior selection from a predicted heatmap.

Candidates are cells whose class score clears a confidence threshold.  The
circular sampler splits the BEV plane into three concentric rings of equal
radial width and gives ring i a quota proportional to its outer radius, so
with M priors the rings receive M/6, 2M/6 and 3M/6 of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import BevGridSpec, MapClass, ShapeError, cell_centers, grid_to_world

DEFAULT_TAU = 0.1
NUM_RINGS = 3


@dataclass(frozen=True)
class Candidate:
    cell: tuple[int, int]
    cls: MapClass
    score: float
    radial_distance: float

    @property
    def sort_key(self):
        return (-self.score, self.cell[0], self.cell[1], int(self.cls))


@dataclass(frozen=True)
class SampledPriors:
    coords: np.ndarray    # M x 2 normalized (x, y)
    features: np.ndarray  # M x C_feat
    classes: np.ndarray   # M class ids
    cells: np.ndarray     # M x 2 (row, col)

    def __len__(self):
        return self.coords.shape[0]

    def permuted(self, order) -> "SampledPriors":
        order = np.asarray(order)
        return SampledPriors(self.coords[order], self.features[order], self.classes[order], self.cells[order])

    def as_rows(self) -> np.ndarray:
        """M x (3 + C_feat) rows: x, y, class, features."""
        return np.hstack([self.coords, self.classes[:, None].astype(float), self.features])


def _radii(spec: BevGridSpec) -> np.ndarray:
    xs, ys = cell_centers(spec)
    cx, cy = spec.range.center
    return np.hypot(xs[None, :] - cx, ys[:, None] - cy)


def max_radius(spec: BevGridSpec) -> float:
    return float(_radii(spec).max())


def threshold_candidates(hm: np.ndarray, tau: float, spec: BevGridSpec) -> list[Candidate]:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    hm = np.asarray(hm, dtype=float)
    if hm.shape[1:] != spec.shape:
        raise ShapeError(f"heatmap {hm.shape} does not match grid {spec.shape}")
    radii = _radii(spec)
    out = []
    for c, r, col in zip(*np.nonzero(hm >= tau)):
        out.append(Candidate((int(r), int(col)), MapClass(int(c)), float(hm[c, r, col]), float(radii[r, col])))
    return out


def ring_index(radius: float, r_max: float) -> int:
    """0, 1 or 2 for radii in [0, R/3), [R/3, 2R/3), [2R/3, R]."""
    if r_max <= 0:
        return 0
    return min(int(math.floor(NUM_RINGS * radius / r_max)), NUM_RINGS - 1)


def ring_quotas(M: int) -> list[int]:
    """M * L_i / sum L rounded half-up, outer radii 1:2:3; the last ring takes the rounding residue."""
    total = NUM_RINGS * (NUM_RINGS + 1) // 2
    quotas = [int(math.floor(M * (i + 1) / total + 0.5)) for i in range(NUM_RINGS - 1)]
    quotas.append(M - sum(quotas))
    return quotas


def csm_sample(cands: list[Candidate], M: int, spec: BevGridSpec) -> list[Candidate]:
    if M < NUM_RINGS:
        raise ValueError(f"M must be >= {NUM_RINGS}, got {M}")
    r_max = max_radius(spec)
    rings: list[list[Candidate]] = [[] for _ in range(NUM_RINGS)]
    for c in cands:
        rings[ring_index(c.radial_distance, r_max)].append(c)

    selected: list[Candidate] = []
    leftovers: list[Candidate] = []
    for ring, quota in zip(rings, ring_quotas(M)):
        ring.sort(key=lambda c: c.sort_key)
        selected.extend(ring[:quota])
        leftovers.extend(ring[quota:])

    short = M - len(selected)
    if short > 0:
        leftovers.sort(key=lambda c: c.sort_key)
        selected.extend(leftovers[:short])
        short = M - len(selected)
    if short > 0:
        cx, cy = spec.range.center
        centre_cell = (
            min(int(math.floor((cy - spec.range.y_min) / spec.resolution)), spec.h - 1),
            min(int(math.floor((cx - spec.range.x_min) / spec.resolution)), spec.w - 1),
        )
        x, y = grid_to_world(centre_cell, spec)
        pad = Candidate(centre_cell, MapClass.DIVIDER, 0.0, math.hypot(x - cx, y - cy))
        selected.extend([pad] * short)
    return selected


def gather_priors(bev: np.ndarray, selected: list[Candidate], spec: BevGridSpec) -> SampledPriors:
    bev = np.asarray(bev, dtype=float)
    if bev.ndim != 3:
        raise ShapeError(f"BEV features must be C x H x W, got {bev.shape}")
    cells = np.array([c.cell for c in selected], dtype=np.int64).reshape(-1, 2)
    rows, cols = cells[:, 0], cells[:, 1]
    if np.any((rows < 0) | (rows >= bev.shape[1]) | (cols < 0) | (cols >= bev.shape[2])):
        raise IndexError("candidate cell outside BEV feature map")
    feats = bev[:, rows, cols].T.copy()
    r = spec.range
    xs = r.x_min + (cols + 0.5) * spec.resolution
    ys = r.y_min + (rows + 0.5) * spec.resolution
    coords = np.stack([(xs - r.x_min) / r.x_extent, (ys - r.y_min) / r.y_extent], axis=1)
    classes = np.array([int(c.cls) for c in selected], dtype=np.int64)
    return SampledPriors(np.clip(coords, 0.0, 1.0), feats, classes, cells)
