"""Geometric, heatmap and classification losses with analytic gradients.

All point losses take the predicted and ground-truth polylines with point
correspondence already resolved and return ``(value, grad)`` where ``grad``
has the shape of the predicted points.  Subgradients are 0 at L1 kinks and
exactly on a supporting line.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .geometry import NUM_CLASSES, GeometryError, MapInstance, PredictionSet, Scene, ShapeError
from .matcher import Assignment, aligned_gt, match_instances

BACKGROUND = NUM_CLASSES
TERMS = ("cls", "pl", "pp", "al")


@dataclass(frozen=True)
class LossWeights:
    alpha_cls: float = 2.0
    alpha_pl: float = 2.5
    alpha_pp: float = 2.5
    alpha_al: float = 2.5
    alpha_heat: float = 0.6
    gamma: float = 0.5   # stage-1 (coarse) weight
    beta: float = 1.0    # stage-2 (fine) weight
    alpha_gauss: float = 0.8
    beta_gauss: float = 8.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0")

    def term(self, name: str) -> float:
        return getattr(self, f"alpha_{name}")

    def to_dict(self) -> dict:
        return asdict(self)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray, bool]:
    closed = gt.closed if isinstance(gt, MapInstance) else False
    p = np.asarray(pred.points if isinstance(pred, MapInstance) else pred, dtype=float)
    g = np.asarray(gt.points if isinstance(gt, MapInstance) else gt, dtype=float)
    if p.shape != g.shape or p.ndim != 2 or p.shape[1] != 2:
        raise ShapeError(f"pred {p.shape} and gt {g.shape} must both be (m, 2)")
    return p, g, closed


def points_points_terms(pred, gt, closed: Optional[bool] = None):
    """Per-point L1 start/end terms (m,) and their gradient (m, 2)."""
    p, g, is_closed = _pair(pred, gt)
    if closed is not None:
        is_closed = closed
    vals, grad = np.zeros(len(p)), np.zeros_like(p)
    if not is_closed:
        for j in (0, len(p) - 1):
            diff = p[j] - g[j]
            vals[j] = np.abs(diff).sum()
            grad[j] = np.sign(diff)
    return vals, grad


def points_points_loss(pred, gt, closed: Optional[bool] = None):
    """L1 distance of the start and end points; closed elements contribute nothing."""
    vals, grad = points_points_terms(pred, gt, closed)
    return float(vals.sum()), grad


def _support(g: np.ndarray, closed: bool):
    """(index of each supervised predicted point, gt[j-1], gt[j]).

    Open polylines supervise j = 1..m-2.  A closed polygon has no ends, so
    every vertex is interior and the indices wrap.
    """
    if closed:
        idx = np.arange(len(g))
        return idx, g[idx - 1], g
    idx = np.arange(1, len(g) - 1)
    return idx, g[:-2], g[1:-1]


def _segments(g: np.ndarray, closed: bool = False):
    idx, g0, g1 = _support(g, closed)
    seg = g1 - g0
    length = np.hypot(seg[:, 0], seg[:, 1])
    if np.any(length <= 0):
        raise GeometryError("zero-length ground-truth segment")
    return idx, g0, seg, length


def point_line_terms(pred, gt, printed: bool = False):
    """Per-point distance to the line through the point's gt segment (gt[j-1], gt[j]).

    ``printed=True`` evaluates the alternative dot-product-style expression
    |((p-a)_x s_x - (p-a)_y s_y)| / |s| for comparison; it is not a distance.
    """
    p, g, closed = _pair(pred, gt)
    vals, grad = np.zeros(len(p)), np.zeros_like(p)
    if len(p) < 3:
        return vals, grad
    idx, g0, seg, length = _segments(g, closed)
    rel = p[idx] - g0
    if printed:
        e = (rel[:, 0] * seg[:, 0] - rel[:, 1] * seg[:, 1]) / length
        de = np.stack([seg[:, 0], -seg[:, 1]], axis=1) / length[:, None]
    else:
        e = (rel[:, 0] * seg[:, 1] - rel[:, 1] * seg[:, 0]) / length
        de = np.stack([seg[:, 1], -seg[:, 0]], axis=1) / length[:, None]
    vals[idx] = np.abs(e)
    grad[idx] = np.sign(e)[:, None] * de
    return vals, grad


def point_line_loss(pred, gt, printed: bool = False):
    vals, grad = point_line_terms(pred, gt, printed)
    return float(vals.sum()), grad


def auxiliary_line_terms(pred, gt):
    """Per-point L1 distances to both ends of the point's gt segment."""
    p, g, closed = _pair(pred, gt)
    vals, grad = np.zeros(len(p)), np.zeros_like(p)
    if len(p) < 3:
        return vals, grad
    idx, g0, g1 = _support(g, closed)
    d1 = p[idx] - g1
    d0 = p[idx] - g0
    vals[idx] = np.abs(d1).sum(axis=1) + np.abs(d0).sum(axis=1)
    grad[idx] = np.sign(d1) + np.sign(d0)
    return vals, grad


def auxiliary_line_loss(pred, gt):
    vals, grad = auxiliary_line_terms(pred, gt)
    return float(vals.sum()), grad


# -- non-smooth loci, for finite-difference checks -----------------------------

def points_points_kinks(pred, gt, tol: float) -> np.ndarray:
    p, g, closed = _pair(pred, gt)
    mask = np.zeros(p.shape, dtype=bool)
    if not closed:
        for j in (0, len(p) - 1):
            mask[j] = np.abs(p[j] - g[j]) < tol
    return mask


def point_line_kinks(pred, gt, tol: float, printed: bool = False) -> np.ndarray:
    p, g, closed = _pair(pred, gt)
    mask = np.zeros(p.shape, dtype=bool)
    if len(p) >= 3:
        idx, g0, seg, length = _segments(g, closed)
        rel = p[idx] - g0
        if printed:
            e = (rel[:, 0] * seg[:, 0] - rel[:, 1] * seg[:, 1]) / length
        else:
            e = (rel[:, 0] * seg[:, 1] - rel[:, 1] * seg[:, 0]) / length
        mask[idx] = (np.abs(e) < tol)[:, None]
    return mask


def auxiliary_line_kinks(pred, gt, tol: float) -> np.ndarray:
    p, g, closed = _pair(pred, gt)
    mask = np.zeros(p.shape, dtype=bool)
    if len(p) >= 3:
        idx, g0, g1 = _support(g, closed)
        mask[idx] = (np.abs(p[idx] - g1) < tol) | (np.abs(p[idx] - g0) < tol)
    return mask


# -- heatmap ---------------------------------------------------------------------

def heatmap_focal_loss(pred: np.ndarray, gt: np.ndarray, weight=None, eps: float = 1e-7):
    """Penalty-reduced pixel focal loss, weighted per cell and normalized by the core-cell count.

    core cells (gt == 1): -(1 - p)^2 log p
    other cells:          -(1 - gt)^4 p^2 log(1 - p)
    ``pred`` is clamped to [eps, 1 - eps]; the gradient is zero where the clamp is active.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    w = np.ones(pred.shape[-2:]) if weight is None else np.asarray(weight, dtype=float)
    if w.shape != pred.shape[-w.ndim:]:
        raise ShapeError(f"weight {w.shape} does not broadcast onto {pred.shape}")
    p = np.clip(pred, eps, 1.0 - eps)
    inside = (pred > eps) & (pred < 1.0 - eps)
    core = gt == 1.0
    n_core = max(int(core.sum()), 1)
    log_p, log_q = np.log(p), np.log1p(-p)
    neg_w = (1.0 - gt) ** 4
    pos_loss = -((1.0 - p) ** 2) * log_p
    neg_loss = -neg_w * p ** 2 * log_q
    pos_grad = 2.0 * (1.0 - p) * log_p - (1.0 - p) ** 2 / p
    neg_grad = neg_w * (-2.0 * p * log_q + p ** 2 / (1.0 - p))
    loss = np.where(core, pos_loss, neg_loss) * w
    grad = np.where(core, pos_grad, neg_grad) * w * inside / n_core
    return float(loss.sum() / n_core), grad


# -- classification ---------------------------------------------------------------

def focal_terms(logits: np.ndarray, targets: np.ndarray, gamma: float = 2.0, alpha: float = 0.25):
    """Per-row softmax focal loss and its logit gradient.

    Foreground targets are weighted by ``alpha``, the background slot (last column) by ``1 - alpha``.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(log_probs)
    rows = np.arange(n)
    pt = probs[rows, targets]
    log_pt = log_probs[rows, targets]
    a = np.where(targets == k - 1, 1.0 - alpha, alpha)
    one_minus = 1.0 - pt
    loss = -a * one_minus ** gamma * log_pt
    if gamma == 0:
        dl_dpt = -a / pt
    else:
        dl_dpt = a * (gamma * one_minus ** (gamma - 1) * log_pt - one_minus ** gamma / pt)
    onehot = np.zeros_like(probs)
    onehot[rows, targets] = 1.0
    grad = (dl_dpt * pt)[:, None] * (onehot - probs)
    return loss, grad


def class_targets(n_pred: int, assignment: Assignment, gt_classes) -> np.ndarray:
    """Matched predictions target their gt class, everything else the background slot."""
    targets = np.full(n_pred, BACKGROUND, dtype=np.int64)
    for p, g, _ in assignment.pairs:
        targets[p] = int(gt_classes[g])
    return targets


def classification_loss(logits, targets, gamma: float = 2.0, alpha: float = 0.25):
    """Focal loss summed over predictions, normalized by the number of foreground targets."""
    logits = np.asarray(logits, dtype=float).reshape(-1, NUM_CLASSES + 1)
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) != len(logits):
        raise ShapeError("one target per prediction")
    if len(targets) == 0:
        return 0.0, np.zeros_like(logits)
    norm = max(int(np.sum(targets != BACKGROUND)), 1)
    loss, grad = focal_terms(logits, targets, gamma, alpha)
    return float(loss.sum() / norm), grad / norm


def prediction_logits(preds: PredictionSet) -> np.ndarray:
    """Logits for every prediction; score-only predictions get log-probabilities
    with the score on their class and the remainder spread evenly."""
    out = np.zeros((len(preds), NUM_CLASSES + 1))
    for i, p in enumerate(preds.predictions):
        if p.logits is not None and p.logits.size == NUM_CLASSES + 1:
            out[i] = p.logits
            continue
        score = min(max(p.score, 1e-6), 1.0 - 1e-6)
        probs = np.full(NUM_CLASSES + 1, (1.0 - score) / NUM_CLASSES)
        probs[int(p.instance.cls)] = score
        out[i] = np.log(probs)
    return out


# -- aggregation -------------------------------------------------------------------

@dataclass
class StageLosses:
    values: dict[str, float]
    point_grads: dict[str, np.ndarray]  # term -> n_pred x m x 2
    logit_grad: np.ndarray
    assignment: Assignment


def stage_losses(preds: PredictionSet, gts: Scene, assignment: Optional[Assignment] = None,
                 printed: bool = False) -> StageLosses:
    """Unweighted per-term losses for one decoder stage, summed over matched instances.

    Unmatched gts add no point terms; unmatched predictions only enter the
    classification term, as background.
    """
    if assignment is None:
        assignment = match_instances(preds, gts)
    m = preds.instances[0].m if len(preds) else 0
    grads = {t: np.zeros((len(preds), m, 2)) for t in ("pl", "pp", "al")}
    values = {t: 0.0 for t in TERMS}
    for p_idx, g_idx, perm in sorted(assignment.pairs):
        pred = preds.instances[p_idx]
        gt = aligned_gt(gts.instances[g_idx], perm)
        for name, fn in (("pl", lambda a, b: point_line_loss(a, b, printed)),
                         ("pp", points_points_loss), ("al", auxiliary_line_loss)):
            v, g = fn(pred, gt)
            values[name] += v
            grads[name][p_idx] += g
    targets = class_targets(len(preds), assignment, [g.cls for g in gts.instances])
    values["cls"], logit_grad = classification_loss(prediction_logits(preds), targets)
    return StageLosses(values, grads, logit_grad, assignment)


@dataclass
class LossBreakdown:
    stage1: dict[str, float]
    stage2: dict[str, float]
    heat: float
    total: float
    weights: LossWeights = field(default_factory=LossWeights)
    gradients: dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stage1": {f"L_{k}": v for k, v in self.stage1.items()},
            "stage2": {f"L_{k}": v for k, v in self.stage2.items()},
            "L_heat": self.heat,
            "L_total": self.total,
            "weights": self.weights.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


def total_loss(stage1: dict, stage2: dict, heat: float, w: LossWeights = LossWeights()) -> LossBreakdown:
    """gamma * sum_t alpha_t L1_t + beta * sum_t alpha_t L2_t + alpha_heat * L_heat."""
    s1 = {t: float(stage1.get(t, 0.0)) for t in TERMS}
    s2 = {t: float(stage2.get(t, 0.0)) for t in TERMS}
    comps = list(s1.values()) + list(s2.values()) + [heat]
    if not all(np.isfinite(c) for c in comps):
        raise ValueError("loss components must be finite")
    first = sum(w.term(t) * s1[t] for t in TERMS)
    second = sum(w.term(t) * s2[t] for t in TERMS)
    total = w.gamma * first + w.beta * second + w.alpha_heat * float(heat)
    return LossBreakdown(s1, s2, float(heat), total, w)


def weighted_point_grad(stage: StageLosses, w: LossWeights, stage_weight: float) -> np.ndarray:
    return stage_weight * sum(w.term(t) * stage.point_grads[t] for t in ("pl", "pp", "al"))


# -- gradient checking --------------------------------------------------------------

def finite_difference_check(fn: Callable[[np.ndarray], tuple], x: np.ndarray, eps: float = 1e-6,
                            exclude: Optional[Callable[[np.ndarray, float], np.ndarray]] = None,
                            floor: float = 1e-8, scale_floor: float = 1e-3) -> float:
    """Max relative error between ``fn``'s analytic gradient and central differences.

    ``fn(x)`` returns ``(value, grad)``.  The error of each coordinate is
    |num - ana| / max(|num|, |ana|, ``floor``, ``scale_floor`` * max|ana|):
    matching zeros count as exact, and components far below the gradient's
    overall scale are judged against that scale rather than against their
    own size, where central-difference roundoff would dominate.
    Coordinates flagged by ``exclude(x, 10 * eps)`` (non-smooth loci) are skipped.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=float)
    _, analytic = fn(x)
    analytic = np.asarray(analytic, dtype=float)
    floor = max(floor, scale_floor * float(np.abs(analytic).max(initial=0.0)))
    skip = np.zeros(x.shape, dtype=bool) if exclude is None else np.asarray(exclude(x, 10 * eps), dtype=bool)
    worst = 0.0
    flat = x.reshape(-1)
    for k in range(flat.size):
        a = analytic.reshape(-1)[k]
        if skip.reshape(-1)[k]:
            continue
        orig = flat[k]
        flat[k] = orig + eps
        fp = fn(x)[0]
        flat[k] = orig - eps
        fm = fn(x)[0]
        flat[k] = orig
        numeric = (fp - fm) / (2 * eps)
        worst = max(worst, abs(numeric - a) / max(abs(numeric), abs(a), floor))
    return worst
