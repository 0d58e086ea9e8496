"""Prediction-to-ground-truth assignment with point-order resolution."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import BevRange, MapInstance, PredictionSet, Scene, ShapeError

DEFAULT_CLASS_WEIGHT = 1.0


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of size min(rows, cols).

    Shortest augmenting path with row/column potentials, O(n^2 m).  Rows are
    inserted in index order and ties pick the lowest column, so equal-cost
    alternatives resolve toward low indices.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ShapeError(f"cost must be 2-D, got {cost.shape}")
    if cost.size == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise ValueError("costs must be finite")
    transposed = cost.shape[0] > cost.shape[1]
    a = cost.T if transposed else cost
    n, m = a.shape
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j] = 1-based row matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            delta, j1 = INF, 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(m + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    pairs = [(int(owner[j]) - 1, j - 1) for j in range(1, m + 1) if owner[j]]
    if transposed:
        pairs = [(c, r) for r, c in pairs]
    return sorted(pairs)


def point_permutations(inst: MapInstance) -> np.ndarray:
    """Equivalent point orderings: open -> identity and reversal; closed -> every cyclic shift, both directions.

    Row 0 is always the identity.
    """
    m = inst.m
    idx = np.arange(m)
    if not inst.closed:
        return np.stack([idx, idx[::-1]])
    fwd = [np.roll(idx, -s) for s in range(m)]
    rev = [np.roll(idx[::-1], -s) for s in range(m)]
    # start the reversed family at point 0 so row m is the pure reflection
    rev = rev[m - 1:] + rev[:m - 1]
    return np.stack(fwd + rev)


def permutation_cost(pred_pts: np.ndarray, gt_pts: np.ndarray, perms: np.ndarray) -> np.ndarray:
    """Mean L1 point distance for every permutation of the gt points."""
    diffs = np.abs(pred_pts[None, :, :] - gt_pts[perms])
    return diffs.sum(axis=2).mean(axis=1)


@dataclass
class Assignment:
    pairs: list[tuple[int, int, int]] = field(default_factory=list)  # (pred, gt, permutation id)
    unmatched_preds: list[int] = field(default_factory=list)
    unmatched_gts: list[int] = field(default_factory=list)
    cost: float = 0.0

    def to_dict(self) -> dict:
        return {
            "pairs": [{"pred": p, "gt": g, "permutation": k} for p, g, k in self.pairs],
            "unmatched_preds": list(self.unmatched_preds),
            "unmatched_gts": list(self.unmatched_gts),
            "cost": self.cost,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


def cost_matrix(preds: PredictionSet, gts: Scene, class_weight: float = DEFAULT_CLASS_WEIGHT,
                rng: BevRange | None = None):
    """(cost, best permutation id) matrices, point distances in normalized coordinates."""
    rng = rng or gts.range
    n_p, n_g = len(preds), len(gts)
    cost = np.zeros((n_p, n_g))
    best = np.zeros((n_p, n_g), dtype=np.int64)
    ms = {i.m for i in preds.instances} | {g.m for g in gts.instances}
    if len(ms) > 1:
        raise ShapeError(f"instances must share one point count, got {sorted(ms)}")
    perms = [point_permutations(g) for g in gts.instances]
    gt_norm = [rng.normalize(g.points) for g in gts.instances]
    for i, p in enumerate(preds.instances):
        pn = rng.normalize(p.points)
        for j, g in enumerate(gts.instances):
            pc = permutation_cost(pn, gt_norm[j], perms[j])
            k = int(np.argmin(pc))
            best[i, j] = k
            cost[i, j] = pc[k] + (class_weight if p.cls != g.cls else 0.0)
    return cost, best


def match_instances(preds: PredictionSet, gts: Scene,
                    class_weight: float = DEFAULT_CLASS_WEIGHT) -> Assignment:
    cost, best = cost_matrix(preds, gts, class_weight)
    pairs = hungarian(cost)
    matched_p = {p for p, _ in pairs}
    matched_g = {g for _, g in pairs}
    return Assignment(
        pairs=[(p, g, int(best[p, g])) for p, g in pairs],
        unmatched_preds=[i for i in range(len(preds)) if i not in matched_p],
        unmatched_gts=[j for j in range(len(gts)) if j not in matched_g],
        cost=float(sum(cost[p, g] for p, g in pairs)),
    )


def aligned_gt(gt: MapInstance, perm_id: int) -> MapInstance:
    return gt.with_points(gt.points[point_permutations(gt)[perm_id]])
