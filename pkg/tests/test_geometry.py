import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fastmap.geometry import (BevGridSpec, BevRange, GeometryError, MapClass, MapInstance, Prediction,
                              PredictionSet, RangeError, Scene, ShapeError, grid_to_world, polyline_length,
                              predictions_from_dict, predictions_to_dict, resample_points, resample_polyline,
                              scene_from_dict, scene_to_dict, world_to_grid, world_to_grid_many)

from .conftest import line


def test_default_grid_shape(spec):
    assert (spec.h, spec.w, spec.resolution) == (200, 100, 0.3)


@pytest.mark.parametrize("p, cell", [((-15, -30), (0, 0)), ((0, 0), (100, 50)), ((14.999, 29.999), (199, 99)),
                                     ((15, 30), (199, 99))])
def test_world_to_grid(spec, p, cell):
    assert world_to_grid(p, spec) == cell


def test_world_to_grid_out_of_range(spec):
    with pytest.raises(RangeError):
        world_to_grid((15.01, 0), spec)


@pytest.mark.parametrize("cell, p", [((0, 0), (-14.85, -29.85)), ((100, 50), (0.15, 0.15))])
def test_grid_to_world(spec, cell, p):
    assert grid_to_world(cell, spec) == pytest.approx(p, abs=1e-12)


def test_grid_to_world_bounds(spec):
    with pytest.raises(IndexError):
        grid_to_world((200, 0), spec)


def test_round_trip_small_grid():
    small = BevGridSpec(h=4, w=4, resolution=1.0, range=BevRange(-2, 2, -2, 2))
    for r in range(4):
        for c in range(4):
            assert world_to_grid(grid_to_world((r, c), small), small) == (r, c)


def test_round_trip_every_default_cell(spec):
    cells = np.array([(r, c) for r in range(spec.h) for c in range(spec.w)])
    centers = np.array([grid_to_world(c, spec) for c in cells])
    assert np.array_equal(world_to_grid_many(centers, spec), cells)


def test_grid_spec_rejects_inconsistent_resolution():
    with pytest.raises(ValueError):
        BevGridSpec(h=200, w=100, resolution=0.25)


def test_resample_uniform_split():
    out = resample_points(np.array([[0, 0], [0, 2.0]]), 3)
    assert np.allclose(out, [[0, 0], [0, 1], [0, 2]], atol=1e-15)


def test_resample_identity_case():
    pts = np.array([[0, 0], [0, 2.0]])
    assert np.array_equal(resample_points(pts, 2), pts)


def _walk_oracle(points, m, closed):
    """Independent arc-length sampler: walk segments accumulating length."""
    pts = [tuple(p) for p in points]
    if closed:
        pts.append(pts[0])
    total = sum(math.dist(a, b) for a, b in zip(pts, pts[1:]))
    step = total / (m if closed else m - 1)
    out = []
    for k in range(m):
        target = k * step
        acc = 0.0
        for a, b in zip(pts, pts[1:]):
            seg = math.dist(a, b)
            if acc + seg >= target - 1e-12:
                t = 0.0 if seg == 0 else min(max((target - acc) / seg, 0.0), 1.0)
                out.append((a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])))
                break
            acc += seg
        else:
            out.append(pts[-1])
    return np.array(out)


def test_resample_unit_square_gives_corners():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1.0]])
    out = resample_points(sq, 4, closed=True)
    oracle = _walk_oracle(sq, 4, True)
    assert np.allclose(out, oracle, atol=1e-12)
    assert sorted(map(tuple, np.round(out, 12))) == sorted(map(tuple, sq))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 30), st.booleans())
def test_resample_matches_walk_oracle(seed, m, closed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-10, 10, size=(rng.integers(3, 8), 2))
    assert np.allclose(resample_points(pts, m, closed), _walk_oracle(pts, m, closed), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(2, 6))
def test_resample_preserves_length_when_vertices_are_kept(seed, per_seg, nseg):
    # equal-length segments subdivided evenly keep every original vertex,
    # the case where arc length survives resampling exactly
    rng = np.random.default_rng(seed)
    ang = rng.uniform(0, 2 * np.pi, nseg)
    pts = np.vstack([[0, 0], np.cumsum(np.stack([np.cos(ang), np.sin(ang)], 1) * 1.5, axis=0)])
    inst = line(pts)
    m = nseg * per_seg + 1
    once = resample_polyline(inst, m)
    twice = resample_polyline(once, m)
    L = polyline_length(pts)
    assert abs(polyline_length(once.points) - L) <= 1e-9 * L
    assert np.allclose(once.points, twice.points, atol=1e-9)


def test_resample_straight_line_idempotent():
    inst = line([[0, 0], [1, 1], [3, 3], [7, 7]])
    once = resample_polyline(inst, 9)
    assert np.allclose(resample_polyline(once, 9).points, once.points, atol=1e-12)
    assert polyline_length(once.points) == pytest.approx(polyline_length(inst.points), rel=1e-12)


def test_resample_degenerate():
    with pytest.raises(GeometryError):
        resample_points(np.array([[1.0, 1.0], [1.0, 1.0]]), 4)


def test_instance_invariants():
    with pytest.raises(GeometryError):
        line([[0, 0], [0, 0], [1, 1]])
    with pytest.raises(ValueError):
        MapInstance(MapClass.PED_CROSSING, np.array([[0, 0], [1, 0], [1, 1.0]]), closed=False)
    with pytest.raises(ValueError):
        MapInstance(MapClass.DIVIDER, np.array([[0, 0], [1, 0.0]]), closed=True)
    with pytest.raises(ShapeError):
        line([[0, 0]])


def test_scene_validation():
    with pytest.raises(RangeError):
        Scene((line([[0, 0], [0, 31]]),))
    Scene((line([[0, -30], [0, 30]]),))


def test_scene_json_round_trip(scene):
    doc = json.loads(json.dumps(scene_to_dict(scene)))
    back = scene_from_dict(doc)
    assert len(back) == len(scene)
    for a, b in zip(back.instances, scene.instances):
        assert a.cls == b.cls and a.closed == b.closed
        assert np.allclose(a.points, b.points, atol=5e-7)
    assert set(doc["instances"][0]) == {"class", "closed", "points"}
    assert doc["range"] == {"x_min": -15.0, "x_max": 15.0, "y_min": -30.0, "y_max": 30.0}


def test_prediction_json_round_trip(scene):
    preds = PredictionSet(tuple(Prediction(i, 0.5 + 0.1 * k, np.arange(4.0)) for k, i in enumerate(scene.instances)))
    back = predictions_from_dict(json.loads(json.dumps(predictions_to_dict(preds))))
    assert np.allclose(back.scores, preds.scores)
    assert np.allclose(back.predictions[0].logits, np.arange(4.0))


def test_prediction_set_requires_common_m():
    with pytest.raises(ShapeError):
        PredictionSet((Prediction(line([[0, 0], [1, 1]])), Prediction(line([[0, 0], [1, 1], [2, 0]]))))
