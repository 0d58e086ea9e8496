import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linear_sum_assignment

from fastmap.geometry import MapClass, MapInstance, Prediction, PredictionSet, Scene
from fastmap.matcher import aligned_gt, hungarian, match_instances, point_permutations
from fastmap.synth import SynthConfig, generate_scene, perturb


def brute_force(cost):
    n, m = cost.shape
    if n <= m:
        return min(sum(cost[i, c] for i, c in enumerate(cols)) for cols in itertools.permutations(range(m), n))
    return brute_force(cost.T)


def assigned_cost(cost, pairs):
    return sum(cost[i, j] for i, j in pairs)


@pytest.mark.parametrize("seed", range(200))
def test_hungarian_equals_exhaustive(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 7, size=2)
    cost = rng.uniform(0, 10, size=(n, m))
    if seed % 4 == 0:
        cost = np.round(cost)  # ties
    pairs = hungarian(cost)
    assert len(pairs) == min(n, m)
    assert len({i for i, _ in pairs}) == len({j for _, j in pairs}) == len(pairs)
    assert assigned_cost(cost, pairs) == pytest.approx(brute_force(cost), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 25), st.integers(1, 25))
def test_hungarian_matches_scipy(seed, n, m):
    cost = np.random.default_rng(seed).uniform(-5, 5, size=(n, m))
    r, c = linear_sum_assignment(cost)
    assert assigned_cost(cost, hungarian(cost)) == pytest.approx(cost[r, c].sum(), abs=1e-9)


def test_hungarian_edge_cases():
    assert hungarian(np.zeros((0, 3))) == []
    assert hungarian([[5.0]]) == [(0, 0)]
    with pytest.raises(ValueError):
        hungarian([[np.inf, 1.0]])


def test_permutation_counts():
    open_ = MapInstance.of(MapClass.DIVIDER, np.arange(10.0).reshape(5, 2) * [1, 0.5])
    sq = MapInstance.of(MapClass.PED_CROSSING, np.array([[0, 0], [1, 0], [1, 1], [0, 1.0]]))
    assert point_permutations(open_).shape == (2, 5)
    perms = point_permutations(sq)
    assert perms.shape == (8, 4)
    assert len({tuple(p) for p in perms}) == 8
    assert perms[0].tolist() == [0, 1, 2, 3] and perms[4].tolist() == [0, 3, 2, 1]


def _scene_pair(seed):
    scene = generate_scene(SynthConfig(seed=seed, m=12))
    return scene, perturb(scene, SynthConfig(seed=seed, m=12, noise=1.0))


def _reversed(inst):
    return inst.with_points(inst.points[::-1])


def _rotated(inst, k):
    return inst.with_points(np.roll(inst.points, k, axis=0))


@pytest.mark.parametrize("seed", range(20))
def test_cost_invariant_under_reversal_and_rotation(seed):
    scene, preds = _scene_pair(seed)
    base = match_instances(preds, scene)
    shift = seed % 11 + 1
    changed = tuple(_rotated(_reversed(g), shift) if g.closed else _reversed(g) for g in scene.instances)
    moved = match_instances(preds, Scene(changed, scene.range))
    assert abs(moved.cost - base.cost) <= 1e-12
    assert [(p, g) for p, g, _ in moved.pairs] == [(p, g) for p, g, _ in base.pairs]
    for (p, g, k), (_, _, k2) in zip(base.pairs, moved.pairs):
        assert np.array_equal(aligned_gt(scene.instances[g], k).points, aligned_gt(changed[g], k2).points)


def test_identity_matching(scene):
    preds = PredictionSet.from_scene(scene)
    a = match_instances(preds, scene)
    assert a.cost == 0.0
    assert [(p, g, k) for p, g, k in a.pairs] == [(i, i, 0) for i in range(len(scene))]


def test_unmatched_lists():
    gts = generate_scene(SynthConfig(seed=1))
    preds = PredictionSet(tuple(Prediction(i) for i in gts.instances[:2]))
    a = match_instances(preds, gts)
    assert len(a.pairs) == 2 and a.unmatched_preds == [] and a.unmatched_gts == [2, 3, 4]
    doc = a.to_dict()
    assert doc["pairs"][0] == {"pred": 0, "gt": 0, "permutation": 0}
