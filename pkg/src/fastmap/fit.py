"""Gradient descent on predicted polyline coordinates under the stage-2 point losses.

The point losses are piecewise linear, so a fixed step oscillates around the
optimum.  Every loss term touches exactly one predicted point, so the
objective separates by point; by default each point backtracks on its own:
a step that would raise its loss is halved until it does not (or is
dropped).  The trace is then non-increasing.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .geometry import PredictionSet, Scene
from .losses import LossWeights, auxiliary_line_terms, point_line_terms, points_points_terms
from .matcher import Assignment, aligned_gt, match_instances

MAX_HALVINGS = 30


class DivergenceError(ArithmeticError):
    pass


def point_objective_terms(pred_pts: np.ndarray, gt, w: LossWeights, stage_weight: float = 1.0):
    """Per-point weighted sum of the point-line, points-points and auxiliary terms."""
    vals, grad = np.zeros(len(pred_pts)), np.zeros_like(pred_pts, dtype=float)
    for alpha, fn in ((w.alpha_pl, point_line_terms), (w.alpha_pp, points_points_terms),
                      (w.alpha_al, auxiliary_line_terms)):
        v, g = fn(pred_pts, gt)
        vals += alpha * v
        grad += alpha * g
    return stage_weight * vals, stage_weight * grad


def point_objective(pred_pts: np.ndarray, gt, w: LossWeights, stage_weight: float = 1.0):
    vals, grad = point_objective_terms(pred_pts, gt, w, stage_weight)
    return float(vals.sum()), grad


def fit_predictions(preds: PredictionSet, gts: Scene, steps: int = 500, lr: float = 0.01,
                    weights: LossWeights = LossWeights(), assignment: Optional[Assignment] = None,
                    backtrack: bool = True) -> tuple[PredictionSet, list[float]]:
    """Returns the optimized predictions and the loss trace (``steps + 1`` values)."""
    if steps < 0 or lr <= 0:
        raise ValueError("need steps >= 0 and lr > 0")
    if assignment is None:
        assignment = match_instances(preds, gts)
    points = [np.array(p.points) for p in preds.instances]
    targets = {p: aligned_gt(gts.instances[g], k) for p, g, k in assignment.pairs}

    def objective(i, pts):
        return point_objective_terms(pts, targets[i], weights, weights.beta)

    current = {i: objective(i, points[i]) for i in targets}
    trace = [float(sum(v.sum() for v, _ in current.values()))]
    for _ in range(steps):
        for i in targets:
            vals, grad = current[i]
            step = np.full(len(vals), lr)
            pending = np.ones(len(vals), dtype=bool)
            new_pts = points[i].copy()
            for _ in range(MAX_HALVINGS if backtrack else 1):
                cand = gts.range.clamp(points[i] - step[:, None] * grad)
                trial = np.where(pending[:, None], cand, new_pts)
                tv, _ = objective(i, trial)
                ok = pending & ((tv <= vals) | (not backtrack))
                new_pts[ok] = cand[ok]
                pending &= ~ok
                if not pending.any():
                    break
                step[pending] *= 0.5
            points[i] = new_pts
            current[i] = objective(i, new_pts)
        total = float(sum(v.sum() for v, _ in current.values()))
        if not np.isfinite(total):
            raise DivergenceError("loss became non-finite")
        trace.append(total)

    out = []
    for i, p in enumerate(preds.predictions):
        out.append(type(p)(p.instance.with_points(points[i]), p.score, p.logits))
    return PredictionSet(tuple(out), preds.range), trace
