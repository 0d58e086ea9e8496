import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fastmap.geometry import BevGridSpec, BevRange, MapClass, grid_to_world
from fastmap.sampler import (Candidate, csm_sample, gather_priors, max_radius, ring_index, ring_quotas,
                             threshold_candidates)


def random_heatmap(seed, spec, density=0.02):
    rng = np.random.default_rng(seed)
    hm = rng.uniform(0, 1, size=(3,) + spec.shape)
    hm[rng.uniform(size=hm.shape) > density] = 0.0
    return hm


def brute_force_rings(hm, tau, M, spec):
    """Oracle: explicit radii per cell, sort each ring by score then row, col, class."""
    cx, cy = spec.range.center
    radii = {}
    for r in range(spec.h):
        for c in range(spec.w):
            x, y = grid_to_world((r, c), spec)
            radii[r, c] = math.hypot(x - cx, y - cy)
    R = max(radii.values())
    rings = [[], [], []]
    for k in range(3):
        for r in range(spec.h):
            for c in range(spec.w):
                if hm[k, r, c] >= tau:
                    i = min(int(3 * radii[r, c] / R), 2)
                    rings[i].append((-hm[k, r, c], r, c, k))
    quotas = [math.floor(M / 6 + 0.5), math.floor(2 * M / 6 + 0.5)]  # half-up
    quotas.append(M - sum(quotas))
    return [sorted(ring)[:q] for ring, q in zip(rings, quotas)]


def test_quotas_sixty():
    assert ring_quotas(60) == [10, 20, 30]


@given(st.integers(3, 5000))
def test_quotas_sum_and_proportion(M):
    q = ring_quotas(M)
    assert sum(q) == M
    for i, qi in enumerate(q):
        assert abs(qi - M * (i + 1) / 6) <= 1.0


def test_ring_index_edges():
    assert ring_index(0.0, 9.0) == 0
    assert ring_index(2.999, 9.0) == 0
    assert ring_index(3.0, 9.0) == 1
    assert ring_index(9.0, 9.0) == 2


def test_max_radius_default(spec):
    # outermost cell centers sit 14.85 m and 29.85 m from the center
    assert max_radius(spec) == pytest.approx(math.hypot(14.85, 29.85), abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_csm_matches_oracle(spec, seed):
    hm = random_heatmap(seed, spec)
    cands = threshold_candidates(hm, 0.1, spec)
    sel = csm_sample(cands, 60, spec)
    assert len(sel) == 60
    rings = brute_force_rings(hm, 0.1, 60, spec)
    got = [(-c.score, c.cell[0], c.cell[1], int(c.cls)) for c in sel]
    expected = [x for ring in rings for x in ring]
    assert got[:len(expected)] == expected


def test_csm_pads_with_leftovers_then_center(spec):
    # three strong candidates, all in the innermost ring
    cands = [Candidate((100, 50 + k), MapClass.DIVIDER, 0.9 - 0.1 * k, 0.2 + 0.3 * k) for k in range(3)]
    sel = csm_sample(cands, 12, spec)
    assert len(sel) == 12
    # inner quota 2 takes the two best, the third comes back as a leftover
    assert [c.score for c in sel[:3]] == pytest.approx([0.9, 0.8, 0.7])
    assert all(c.score == 0.0 for c in sel[3:])
    assert {c.cell for c in sel[3:]} == {(100, 50)}


def test_csm_empty_input(spec):
    sel = csm_sample([], 6, spec)
    assert len(sel) == 6 and all(c.score == 0 for c in sel)


def test_csm_distant_ring_filled_by_quota(spec):
    # many weak far candidates and many strong near ones; a plain top-M would drop the far ring
    hm = np.zeros((3,) + spec.shape)
    hm[0, 95:105, 45:55] = 0.95
    hm[2, 0:3, 0:100] = 0.2
    sel = csm_sample(threshold_candidates(hm, 0.1, spec), 60, spec)
    r_max = max_radius(spec)
    outer = [c for c in sel if ring_index(c.radial_distance, r_max) == 2]
    assert len(outer) == 30


def test_threshold_validation(spec):
    with pytest.raises(ValueError):
        threshold_candidates(np.zeros((3,) + spec.shape), 0.0, spec)


def test_gather_priors_values():
    spec = BevGridSpec(h=4, w=4, resolution=1.0, range=BevRange(-2, 2, -2, 2))
    bev = np.arange(2 * 16, dtype=float).reshape(2, 4, 4)
    sel = [Candidate((0, 0), MapClass.DIVIDER, 0.5, 0.0), Candidate((3, 2), MapClass.BOUNDARY, 0.5, 0.0)]
    pri = gather_priors(bev, sel, spec)
    assert np.allclose(pri.coords, [[0.125, 0.125], [0.625, 0.875]])
    assert np.array_equal(pri.features, [[0, 16], [14, 30]])
    assert pri.classes.tolist() == [0, 2]
    assert pri.as_rows().shape == (2, 5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.integers(3, 400))
def test_priors_size_and_unit_square(seed, M):
    spec = BevGridSpec()
    hm = random_heatmap(seed, spec, 0.01)
    sel = csm_sample(threshold_candidates(hm, 0.5, spec), M, spec)
    pri = gather_priors(np.zeros((2,) + spec.shape), sel, spec)
    assert len(pri) == M
    assert pri.coords.min() >= 0 and pri.coords.max() <= 1
