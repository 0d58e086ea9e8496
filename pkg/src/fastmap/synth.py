"""Deterministic synthetic BEV scenes and noisy prediction sets.

Randomness comes from a 64-bit linear congruential generator with Knuth's
MMIX constants, so a seed maps to the same scene on any platform:

    state <- (6364136223846793005 * state + 1442695040888963407) mod 2**64
    uniform = (state >> 11) / 2**53
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import BevRange, MapClass, MapInstance, Prediction, PredictionSet, Scene, resample_points

LCG_MULTIPLIER = 6364136223846793005
LCG_INCREMENT = 1442695040888963407
MASK64 = (1 << 64) - 1

MIN_CURVE_LENGTH = 8.0
DENSE_SAMPLES = 400


class Lcg64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK64
        self.next_u64()

    def next_u64(self) -> int:
        self.state = (LCG_MULTIPLIER * self.state + LCG_INCREMENT) & MASK64
        return self.state

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * (1.0 / (1 << 53)))

    def sign(self) -> float:
        return 1.0 if self.uniform() < 0.5 else -1.0


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    dividers: int = 2
    crossings: int = 1
    boundaries: int = 2
    curvature: tuple[float, float] = (0.0, 0.03)  # 1/m
    noise: float = 0.5                            # m, perturbation half-width
    m: int = 20
    range: BevRange = BevRange()

    def __post_init__(self):
        if min(self.dividers, self.crossings, self.boundaries) < 0:
            raise ValueError("instance counts must be >= 0")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.m < 3:
            raise ValueError("m must be >= 3")


def _clip_to_range(dense: np.ndarray, rng: BevRange) -> np.ndarray:
    """Longest run of consecutive samples inside the range."""
    inside = ((dense[:, 0] >= rng.x_min) & (dense[:, 0] <= rng.x_max)
              & (dense[:, 1] >= rng.y_min) & (dense[:, 1] <= rng.y_max))
    best, start, best_span = None, None, 0
    for k, ok in enumerate(np.append(inside, False)):
        if ok and start is None:
            start = k
        elif not ok and start is not None:
            if k - start > best_span:
                best, best_span = (start, k), k - start
            start = None
    return dense[best[0]:best[1]] if best else dense[:0]


def _curve(gen: Lcg64, cfg: SynthConfig, lateral: tuple[float, float]) -> np.ndarray:
    """Quadratic Bezier roughly along the longitudinal axis, clipped to range."""
    rng = cfg.range
    while True:
        x0 = gen.uniform(*lateral) * gen.sign()
        heading = math.pi / 2 + gen.uniform(-0.25, 0.25)
        length = gen.uniform(25.0, 70.0)
        kappa = gen.uniform(*cfg.curvature) * gen.sign()
        y_mid = gen.uniform(rng.y_min * 0.4, rng.y_max * 0.4)
        d = np.array([math.cos(heading), math.sin(heading)])
        normal = np.array([-d[1], d[0]])
        mid = np.array([x0, y_mid])
        p0, p2 = mid - 0.5 * length * d, mid + 0.5 * length * d
        # control offset giving a circular-arc-like sagitta kappa * L^2 / 8 at the apex
        p1 = mid + normal * (kappa * length * length / 4.0)
        t = np.linspace(0.0, 1.0, DENSE_SAMPLES)[:, None]
        dense = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
        dense = _clip_to_range(dense, rng)
        if len(dense) >= 2 and np.sum(np.hypot(*np.diff(dense, axis=0).T)) >= MIN_CURVE_LENGTH:
            return dense


def _rectangle(gen: Lcg64, cfg: SynthConfig) -> np.ndarray:
    rng = cfg.range
    w, h = gen.uniform(3.0, 8.0), gen.uniform(2.0, 5.0)
    cx = gen.uniform(rng.x_min + w / 2 + 0.5, rng.x_max - w / 2 - 0.5)
    cy = gen.uniform(rng.y_min + h / 2 + 0.5, rng.y_max - h / 2 - 0.5)
    return np.array([[cx - w / 2, cy - h / 2], [cx + w / 2, cy - h / 2],
                     [cx + w / 2, cy + h / 2], [cx - w / 2, cy + h / 2]])


def generate_scene(cfg: SynthConfig = SynthConfig()) -> Scene:
    gen = Lcg64(cfg.seed)
    half_w = cfg.range.x_extent / 2
    instances = []
    for _ in range(cfg.dividers):
        pts = resample_points(_curve(gen, cfg, (0.0, 0.5 * half_w)), cfg.m)
        instances.append(MapInstance.of(MapClass.DIVIDER, pts))
    for _ in range(cfg.crossings):
        pts = resample_points(_rectangle(gen, cfg), cfg.m, closed=True)
        instances.append(MapInstance.of(MapClass.PED_CROSSING, pts))
    for _ in range(cfg.boundaries):
        pts = resample_points(_curve(gen, cfg, (0.5 * half_w, 0.9 * half_w)), cfg.m)
        instances.append(MapInstance.of(MapClass.BOUNDARY, pts))
    return Scene(tuple(instances), cfg.range)


def perturb(scene: Scene, cfg: SynthConfig = SynthConfig()) -> PredictionSet:
    """Uniform [-noise, noise]^2 jitter on every point (clamped to range), scores in [0.5, 1]."""
    gen = Lcg64(cfg.seed ^ 0x9E3779B97F4A7C15)
    preds = []
    for inst in scene.instances:
        jitter = np.array([[gen.uniform(-cfg.noise, cfg.noise) for _ in range(2)] for _ in range(inst.m)])
        pts = scene.range.clamp(inst.points + jitter) if cfg.noise > 0 else inst.points.copy()
        preds.append(Prediction(inst.with_points(pts), gen.uniform(0.5, 1.0)))
    return PredictionSet(tuple(preds), scene.range)
