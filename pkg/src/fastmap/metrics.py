"""Chamfer-distance average precision and smoothness diagnostics for vector maps."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import GeometryError, MapClass, MapInstance, PredictionSet, Scene, resample_points
from .matcher import permutation_cost, point_permutations

STRICT = (0.2, 0.5, 1.0)
STANDARD = (0.5, 1.0, 1.5)
THRESHOLD_SETS = {"strict": STRICT, "standard": STANDARD}
DEFAULT_DENSIFY = 100
JITTER_PRED_DEG = 30.0
JITTER_GT_DEG = 5.0


def densify(inst: MapInstance, n: int = DEFAULT_DENSIFY) -> np.ndarray:
    return resample_points(inst.points, n, inst.closed)


def chamfer_points(a: np.ndarray, b: np.ndarray) -> float:
    d = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


def chamfer_distance(a: MapInstance, b: MapInstance, n: int = DEFAULT_DENSIFY) -> float:
    """Symmetric mean nearest-neighbour distance between arc-length densified polylines."""
    if n < max(a.m, b.m):
        raise ValueError(f"densify count {n} below instance point count")
    return chamfer_points(densify(a, n), densify(b, n))


@dataclass
class ApReport:
    thresholds: tuple[float, ...]
    per_threshold: dict[str, list[float]]  # class label -> AP at each threshold
    per_class: dict[str, float]
    mAP: float
    excluded: list[str] = field(default_factory=list)
    curves: dict = field(default_factory=dict)  # (label, threshold) -> (recall, precision)

    @property
    def name(self) -> str:
        for k, v in THRESHOLD_SETS.items():
            if tuple(v) == tuple(self.thresholds):
                return k
        return "custom"

    def to_dict(self) -> dict:
        return {
            "threshold_set": self.name,
            "thresholds": list(self.thresholds),
            "AP": {k: {"per_threshold": self.per_threshold[k], "mean": self.per_class[k]} for k in self.per_class},
            "mAP": self.mAP,
            "excluded_classes": list(self.excluded),
        }


@dataclass
class DiagnosticsReport:
    acd: float
    ard: float
    ajp: float
    matches: int

    def to_dict(self) -> dict:
        return {"ACD": self.acd, "ARD": self.ard, "AJP": self.ajp, "matches": self.matches}


def greedy_match(order: Sequence[int], dist: np.ndarray, threshold: float) -> tuple[np.ndarray, list]:
    """Walk predictions in ``order``; each takes its nearest still-free gt if closer than ``threshold``.

    ``dist`` is n_pred x n_gt.  Returns the TP flags in walk order and the (pred, gt) pairs.
    """
    free = np.ones(dist.shape[1], dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    pairs = []
    for rank, i in enumerate(order):
        if not free.any():
            continue
        cand = np.where(free, dist[i], np.inf)
        j = int(np.argmin(cand))
        if cand[j] < threshold:
            free[j] = False
            tp[rank] = True
            pairs.append((int(i), j))
    return tp, pairs


def pr_curve(tp: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / max(n_gt, 1)
    precision = tps / np.maximum(tps + fps, 1)
    return recall, precision


def interpolated_ap(recall: np.ndarray, precision: np.ndarray, mode: str = "101") -> float:
    """AP from a PR curve: ``"101"`` samples the interpolated precision at 101 recall levels,
    ``"area"`` integrates the interpolated curve exactly."""
    if len(recall) == 0:
        return 0.0
    if mode == "101":
        levels = np.linspace(0.0, 1.0, 101)
        total = 0.0
        for r in levels:
            mask = recall >= r - 1e-12
            total += float(precision[mask].max()) if mask.any() else 0.0
        return total / len(levels)
    if mode == "area":
        mrec = np.concatenate([[0.0], recall, [1.0]])
        mpre = np.concatenate([[0.0], precision, [0.0]])
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
        return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    raise ValueError(f"unknown AP mode {mode!r}")


def _score_order(scores: np.ndarray) -> np.ndarray:
    # stable sort: equal scores keep their input order
    return np.argsort(-scores, kind="stable")


def _class_distances(preds: PredictionSet, gts: Scene, cls: MapClass, n: int):
    p_idx = [i for i, p in enumerate(preds.instances) if p.cls == cls]
    g_idx = [j for j, g in enumerate(gts.instances) if g.cls == cls]
    p_dense = [densify(preds.instances[i], n) for i in p_idx]
    g_dense = [densify(gts.instances[j], n) for j in g_idx]
    dist = np.array([[chamfer_points(a, b) for b in g_dense] for a in p_dense]).reshape(len(p_idx), len(g_idx))
    return p_idx, g_idx, dist


def average_precision(preds: PredictionSet, gts: Scene, thresholds: Sequence[float] = STANDARD,
                      n: int = DEFAULT_DENSIFY, mode: str = "101") -> ApReport:
    thresholds = tuple(float(t) for t in thresholds)
    per_threshold, per_class, excluded, curves = {}, {}, [], {}
    for cls in MapClass:
        p_idx, g_idx, dist = _class_distances(preds, gts, cls, n)
        if not g_idx:
            excluded.append(cls.label)
            continue
        scores = np.array([preds.predictions[i].score for i in p_idx])
        order = _score_order(scores)
        aps = []
        for t in thresholds:
            tp, _ = greedy_match(order, dist, t)
            recall, precision = pr_curve(tp, len(g_idx))
            curves[(cls.label, t)] = (recall, precision)
            aps.append(interpolated_ap(recall, precision, mode))
        per_threshold[cls.label] = aps
        per_class[cls.label] = float(np.mean(aps))
    mAP = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return ApReport(thresholds, per_threshold, per_class, mAP, excluded, curves)


def positive_pairs(preds: PredictionSet, gts: Scene, threshold: float,
                   n: int = DEFAULT_DENSIFY) -> list[tuple[int, int, float]]:
    """Predictions matched (same class, greedy by score) within ``threshold``: (pred, gt, chamfer)."""
    out = []
    for cls in MapClass:
        p_idx, g_idx, dist = _class_distances(preds, gts, cls, n)
        if not p_idx or not g_idx:
            continue
        scores = np.array([preds.predictions[i].score for i in p_idx])
        _, pairs = greedy_match(_score_order(scores), dist, threshold)
        out.extend((p_idx[a], g_idx[b], float(dist[a, b])) for a, b in pairs)
    return sorted(out)


def turn_angles(points: np.ndarray, closed: bool = False) -> np.ndarray:
    """Unsigned angle between consecutive segments at each interior vertex (every vertex if closed)."""
    pts = np.asarray(points, dtype=float)
    if closed:
        prev, nxt = pts - np.roll(pts, 1, axis=0), np.roll(pts, -1, axis=0) - pts
    else:
        prev, nxt = pts[1:-1] - pts[:-2], pts[2:] - pts[1:-1]
    la = np.hypot(prev[:, 0], prev[:, 1])
    lb = np.hypot(nxt[:, 0], nxt[:, 1])
    if np.any(la <= 0) or np.any(lb <= 0):
        raise GeometryError("zero-length segment")
    cross = prev[:, 0] * nxt[:, 1] - prev[:, 1] * nxt[:, 0]
    dot = (prev * nxt).sum(axis=1)
    return np.abs(np.arctan2(cross, dot))


def _aligned(pred: MapInstance, gt: MapInstance) -> tuple[np.ndarray, np.ndarray]:
    """Bring gt to the pred's point count and its best-matching point order."""
    g = gt.points if gt.m == pred.m else resample_points(gt.points, pred.m, gt.closed)
    gi = gt.with_points(g)
    perms = point_permutations(gi)
    k = int(np.argmin(permutation_cost(pred.points, g, perms)))
    return pred.points, g[perms[k]]


def diagnostics(preds: PredictionSet, gts: Scene, thresholds: Sequence[float] = STANDARD,
                n: int = DEFAULT_DENSIFY) -> DiagnosticsReport:
    """ACD, ARD and AJP over positives, i.e. predictions matched under the largest threshold."""
    pairs = positive_pairs(preds, gts, max(thresholds), n)
    if not pairs:
        return DiagnosticsReport(0.0, 0.0, 0.0, 0)
    acd = float(np.mean([c for _, _, c in pairs]))
    ard_terms, ajp_terms = [], []
    for p, g, _ in pairs:
        pred, gt = preds.instances[p], gts.instances[g]
        pp, gp = _aligned(pred, gt)
        if len(pp) < 3:
            ard_terms.append(0.0)
            ajp_terms.append(0.0)
            continue
        a_p = turn_angles(pp, gt.closed)
        a_g = turn_angles(gp, gt.closed)
        ard_terms.append(float(np.abs(a_p - a_g).sum()))
        ajp_terms.append(float(np.sum((a_p > math.radians(JITTER_PRED_DEG)) & (a_g < math.radians(JITTER_GT_DEG)))))
    return DiagnosticsReport(acd, float(np.mean(ard_terms)), float(np.mean(ajp_terms)), len(pairs))


def acd(preds: PredictionSet, gts: Scene, thresholds: Sequence[float] = STANDARD) -> float:
    return diagnostics(preds, gts, thresholds).acd


def ard(preds: PredictionSet, gts: Scene, thresholds: Sequence[float] = STANDARD) -> float:
    return diagnostics(preds, gts, thresholds).ard


def ajp(preds: PredictionSet, gts: Scene, thresholds: Sequence[float] = STANDARD) -> float:
    return diagnostics(preds, gts, thresholds).ajp


TABLE_COLUMNS = (("AP_div", "divider"), ("AP_ped", "ped_crossing"), ("AP_bou", "boundary"))


def format_table(reports: Sequence[ApReport], diag: Optional[DiagnosticsReport] = None) -> str:
    """Aligned text table: one row per threshold set, AP values in percent."""
    header = ["thresholds"] + [c for c, _ in TABLE_COLUMNS] + ["mAP"]
    rows = []
    for rep in reports:
        tag = "[" + ",".join(f"{t:g}m" for t in rep.thresholds) + "]"
        cells = [tag]
        for _, label in TABLE_COLUMNS:
            cells.append(f"{100 * rep.per_class[label]:.1f}" if label in rep.per_class else "-")
        cells.append(f"{100 * rep.mAP:.1f}")
        rows.append(cells)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [header] + rows]
    if diag is not None:
        lines.append(f"ACD {diag.acd:.4f} m  ARD {diag.ard:.4f} rad  AJP {diag.ajp:.3f}  (matches {diag.matches})")
    return "\n".join(lines) + "\n"


def reports_to_json(reports: Sequence[ApReport], diag: Optional[DiagnosticsReport] = None) -> str:
    doc = {"ap": [r.to_dict() for r in reports]}
    if diag is not None:
        doc["diagnostics"] = diag.to_dict()
    return json.dumps(doc, indent=1) + "\n"


def pr_csv(report: ApReport) -> str:
    lines = ["class,threshold,rank,recall,precision"]
    for (label, t), (rec, prec) in sorted(report.curves.items()):
        for k, (r, p) in enumerate(zip(rec, prec)):
            lines.append(f"{label},{t:g},{k + 1},{r:.6f},{p:.6f}")
    return "\n".join(lines) + "\n"
