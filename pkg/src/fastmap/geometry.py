"""Core map types: classes, instances, scenes, the BEV grid and polyline resampling.

Conventions:
  - points are (x, y) in meters; x lateral, y longitudinal
  - grid rows index y, columns index x, row 0 at y_min
  - closed instances do not repeat their first point
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

COINCIDENT_EPS = 1e-9


class GeometryError(ValueError):
    """Degenerate geometry (zero-length segment or polyline)."""


class RangeError(ValueError):
    """Point outside the BEV range."""


class ShapeError(ValueError):
    """Array or point-count mismatch."""


class MapClass(enum.IntEnum):
    DIVIDER = 0
    PED_CROSSING = 1
    BOUNDARY = 2

    @property
    def label(self) -> str:
        return _LABELS[self]

    @property
    def closed(self) -> bool:
        return self is MapClass.PED_CROSSING

    @classmethod
    def from_label(cls, label: str) -> "MapClass":
        try:
            return _FROM_LABEL[label]
        except KeyError:
            raise ValueError(f"unknown map class {label!r}") from None


_LABELS = {
    MapClass.DIVIDER: "divider",
    MapClass.PED_CROSSING: "ped_crossing",
    MapClass.BOUNDARY: "boundary",
}
_FROM_LABEL = {v: k for k, v in _LABELS.items()}
NUM_CLASSES = len(MapClass)


@dataclass(frozen=True)
class BevRange:
    x_min: float = -15.0
    x_max: float = 15.0
    y_min: float = -30.0
    y_max: float = 30.0

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"empty range {self}")

    @property
    def x_extent(self) -> float:
        return self.x_max - self.x_min

    @property
    def y_extent(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def contains(self, pts: np.ndarray) -> bool:
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        return bool(
            np.all((pts[:, 0] >= self.x_min) & (pts[:, 0] <= self.x_max)
                   & (pts[:, 1] >= self.y_min) & (pts[:, 1] <= self.y_max))
        )

    def clamp(self, pts: np.ndarray) -> np.ndarray:
        out = np.array(pts, dtype=float)
        out[..., 0] = np.clip(out[..., 0], self.x_min, self.x_max)
        out[..., 1] = np.clip(out[..., 1], self.y_min, self.y_max)
        return out

    def normalize(self, pts: np.ndarray) -> np.ndarray:
        """Metric (x, y) -> [0, 1]^2."""
        pts = np.asarray(pts, dtype=float)
        lo = np.array([self.x_min, self.y_min])
        ext = np.array([self.x_extent, self.y_extent])
        return (pts - lo) / ext

    def denormalize(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        lo = np.array([self.x_min, self.y_min])
        ext = np.array([self.x_extent, self.y_extent])
        return lo + pts * ext

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max,
                "y_min": self.y_min, "y_max": self.y_max}


@dataclass(frozen=True)
class BevGridSpec:
    h: int = 200
    w: int = 100
    resolution: float = 0.3
    range: BevRange = field(default_factory=BevRange)

    def __post_init__(self):
        if self.h < 2 or self.w < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.h}x{self.w}")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        tol = 1e-9 * max(self.range.x_extent, self.range.y_extent)
        if abs(self.h * self.resolution - self.range.y_extent) > tol:
            raise ValueError(f"h*resolution != y extent ({self.h}*{self.resolution} vs {self.range.y_extent})")
        if abs(self.w * self.resolution - self.range.x_extent) > tol:
            raise ValueError(f"w*resolution != x extent ({self.w}*{self.resolution} vs {self.range.x_extent})")

    @classmethod
    def from_resolution(cls, resolution: float, range: Optional[BevRange] = None) -> "BevGridSpec":
        range = range or BevRange()
        h = int(round(range.y_extent / resolution))
        w = int(round(range.x_extent / resolution))
        return cls(h=h, w=w, resolution=resolution, range=range)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.h, self.w)

    def to_dict(self) -> dict:
        return {"h": self.h, "w": self.w, "resolution": self.resolution, "range": self.range.to_dict()}


GRID_SNAP = 1e-9  # in cells


def continuous_cell(p, spec: BevGridSpec) -> tuple[float, float]:
    """Fractional (u, v) = (column, row) coordinates of metric ``p``.

    Values within GRID_SNAP of a grid line snap onto it, so a point meant to
    lie on a cell boundary (say -28.8 m at 0.3 m cells) is not pushed to
    either side by the rounding of the division.
    """
    r = spec.range
    u = (float(p[0]) - r.x_min) / spec.resolution
    v = (float(p[1]) - r.y_min) / spec.resolution
    ru, rv = round(u), round(v)
    return (ru if abs(u - ru) < GRID_SNAP else u), (rv if abs(v - rv) < GRID_SNAP else v)


def world_to_grid(p, spec: BevGridSpec) -> tuple[int, int]:
    """Cell (row, col) containing metric point ``p``; the max edge clamps into the last cell."""
    x, y = float(p[0]), float(p[1])
    r = spec.range
    if not (r.x_min <= x <= r.x_max and r.y_min <= y <= r.y_max):
        raise RangeError(f"point ({x}, {y}) outside range {r}")
    u, v = continuous_cell(p, spec)
    return min(max(math.floor(v), 0), spec.h - 1), min(max(math.floor(u), 0), spec.w - 1)


def world_to_grid_many(pts: np.ndarray, spec: BevGridSpec) -> np.ndarray:
    """Vectorized world_to_grid; returns an (N, 2) int array of (row, col)."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    if not spec.range.contains(pts):
        raise RangeError("points outside range")
    r = spec.range
    uv = np.stack([(pts[:, 0] - r.x_min), (pts[:, 1] - r.y_min)], axis=1) / spec.resolution
    near = np.round(uv)
    uv = np.where(np.abs(uv - near) < GRID_SNAP, near, uv)
    rows = np.clip(np.floor(uv[:, 1]), 0, spec.h - 1)
    cols = np.clip(np.floor(uv[:, 0]), 0, spec.w - 1)
    return np.stack([rows, cols], axis=1).astype(np.int64)


def grid_to_world(cell, spec: BevGridSpec) -> tuple[float, float]:
    row, col = int(cell[0]), int(cell[1])
    if not (0 <= row < spec.h and 0 <= col < spec.w):
        raise IndexError(f"cell {cell} outside {spec.h}x{spec.w} grid")
    r = spec.range
    return (r.x_min + (col + 0.5) * spec.resolution, r.y_min + (row + 0.5) * spec.resolution)


def cell_centers(spec: BevGridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Metric x (per column) and y (per row) of cell centers."""
    r = spec.range
    xs = r.x_min + (np.arange(spec.w) + 0.5) * spec.resolution
    ys = r.y_min + (np.arange(spec.h) + 0.5) * spec.resolution
    return xs, ys


@dataclass(frozen=True, eq=False)
class MapInstance:
    cls: MapClass
    points: np.ndarray
    closed: bool = False

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ShapeError(f"points must be (m, 2), got {pts.shape}")
        if pts.shape[0] < 2:
            raise ShapeError("an instance needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite point")
        cls = MapClass(self.cls)
        if bool(self.closed) != cls.closed:
            raise ValueError(f"{cls.label} must have closed={cls.closed}")
        seg = np.diff(pts, axis=0)
        if self.closed:
            seg = np.vstack([seg, pts[:1] - pts[-1:]])
        if np.any(np.hypot(seg[:, 0], seg[:, 1]) <= COINCIDENT_EPS):
            raise GeometryError("coincident consecutive points")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "cls", cls)
        object.__setattr__(self, "closed", bool(self.closed))

    @classmethod
    def of(cls, map_class: MapClass, points) -> "MapInstance":
        return cls(map_class, points, MapClass(map_class).closed)

    @property
    def m(self) -> int:
        return self.points.shape[0]

    def with_points(self, points) -> "MapInstance":
        return MapInstance(self.cls, points, self.closed)

    def __eq__(self, other):
        if not isinstance(other, MapInstance):
            return NotImplemented
        return (self.cls == other.cls and self.closed == other.closed
                and self.points.shape == other.points.shape
                and bool(np.array_equal(self.points, other.points)))

    __hash__ = None


def polyline_length(points: np.ndarray, closed: bool = False) -> float:
    pts = np.asarray(points, dtype=float)
    if closed:
        pts = np.vstack([pts, pts[:1]])
    return float(np.sum(np.hypot(*np.diff(pts, axis=0).T)))


def resample_points(points: np.ndarray, m: int, closed: bool = False) -> np.ndarray:
    """``m`` points equally spaced by arc length along a polyline (or cycle)."""
    if m < 2:
        raise ValueError("m must be >= 2")
    pts = np.asarray(points, dtype=float)
    if closed:
        pts = np.vstack([pts, pts[:1]])
    seg = np.hypot(*np.diff(pts, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if not total > 0:
        raise GeometryError("zero-length polyline")
    if closed:
        targets = np.arange(m) * (total / m)
    else:
        targets = np.linspace(0.0, total, m)
    idx = np.searchsorted(cum, targets, side="right") - 1
    idx = np.clip(idx, 0, len(seg) - 1)
    # skip zero-length segments so the interpolation never divides by zero
    seg_len = np.where(seg[idx] > 0, seg[idx], 1.0)
    t = np.clip((targets - cum[idx]) / seg_len, 0.0, 1.0)
    out = pts[idx] + t[:, None] * (pts[idx + 1] - pts[idx])
    if not closed:
        out[0], out[-1] = pts[0], pts[-1]
    return out


def resample_polyline(inst: MapInstance, m: int) -> MapInstance:
    return inst.with_points(resample_points(inst.points, m, inst.closed))


@dataclass(frozen=True)
class Scene:
    instances: tuple[MapInstance, ...] = ()
    range: BevRange = field(default_factory=BevRange)

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        for i, inst in enumerate(self.instances):
            if not self.range.contains(inst.points):
                raise RangeError(f"instance {i} leaves range {self.range}")

    def __len__(self):
        return len(self.instances)


@dataclass(frozen=True)
class Prediction:
    instance: MapInstance
    score: float = 1.0
    logits: Optional[np.ndarray] = None

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("non-finite score")
        if self.logits is not None:
            lg = np.array(self.logits, dtype=float).reshape(-1)
            lg.setflags(write=False)
            object.__setattr__(self, "logits", lg)


@dataclass(frozen=True)
class PredictionSet:
    predictions: tuple[Prediction, ...] = ()
    range: BevRange = field(default_factory=BevRange)

    def __post_init__(self):
        object.__setattr__(self, "predictions", tuple(self.predictions))
        ms = {p.instance.m for p in self.predictions}
        if len(ms) > 1:
            raise ShapeError(f"predictions disagree on point count: {sorted(ms)}")

    def __len__(self):
        return len(self.predictions)

    @property
    def instances(self) -> tuple[MapInstance, ...]:
        return tuple(p.instance for p in self.predictions)

    @property
    def scores(self) -> np.ndarray:
        return np.array([p.score for p in self.predictions], dtype=float)

    @classmethod
    def from_scene(cls, scene: Scene, scores: Optional[Sequence[float]] = None) -> "PredictionSet":
        scores = [1.0] * len(scene) if scores is None else list(scores)
        return cls(tuple(Prediction(i, s) for i, s in zip(scene.instances, scores)), scene.range)


# -- JSON ---------------------------------------------------------------------

def _instance_dict(inst: MapInstance) -> dict:
    return {
        "class": inst.cls.label,
        "closed": inst.closed,
        "points": [[round(float(x), 6), round(float(y), 6)] for x, y in inst.points],
    }


def scene_to_dict(scene: Scene) -> dict:
    return {"range": scene.range.to_dict(), "instances": [_instance_dict(i) for i in scene.instances]}


def predictions_to_dict(preds: PredictionSet) -> dict:
    items = []
    for p in preds.predictions:
        d = _instance_dict(p.instance)
        d["score"] = round(float(p.score), 6)
        if p.logits is not None:
            d["logits"] = [round(float(v), 6) for v in p.logits]
        items.append(d)
    return {"range": preds.range.to_dict(), "instances": items}


def _parse_instance(d: dict) -> MapInstance:
    cls = MapClass.from_label(d["class"])
    closed = bool(d.get("closed", cls.closed))
    return MapInstance(cls, np.asarray(d["points"], dtype=float), closed)


def scene_from_dict(d: dict) -> Scene:
    rng = BevRange(**d["range"]) if "range" in d else BevRange()
    return Scene(tuple(_parse_instance(i) for i in d.get("instances", [])), rng)


def predictions_from_dict(d: dict) -> PredictionSet:
    rng = BevRange(**d["range"]) if "range" in d else BevRange()
    preds = []
    for item in d.get("instances", []):
        preds.append(Prediction(_parse_instance(item), float(item.get("score", 1.0)), item.get("logits")))
    return PredictionSet(tuple(preds), rng)


def dumps(obj: dict) -> str:
    return json.dumps(obj, indent=1) + "\n"


def iter_segments(points: np.ndarray, closed: bool) -> Iterable[tuple[np.ndarray, np.ndarray]]:
    n = len(points)
    last = n if closed else n - 1
    for i in range(last):
        yield points[i], points[(i + 1) % n]
