import numpy as np
import pytest

from fastmap.fit import DivergenceError, fit_predictions, point_objective
from fastmap.losses import (LossWeights, auxiliary_line_kinks, finite_difference_check, point_line_kinks,
                            points_points_kinks)
from fastmap.metrics import chamfer_distance
from fastmap.synth import SynthConfig, generate_scene, perturb

from .conftest import random_open_pair


def _pair(seed, noise=0.5):
    scene = generate_scene(SynthConfig(seed=seed))
    return scene, perturb(scene, SynthConfig(seed=seed, noise=noise))


def test_zero_steps_is_identity():
    scene, preds = _pair(0)
    out, trace = fit_predictions(preds, scene, steps=0)
    assert len(trace) == 1
    assert all(np.array_equal(a.points, b.points) for a, b in zip(out.instances, preds.instances))


def test_trace_non_increasing_with_backtracking():
    scene, preds = _pair(1)
    _, trace = fit_predictions(preds, scene, steps=60)
    assert len(trace) == 61
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def test_fit_reduces_chamfer():
    scene, preds = _pair(2)
    out, _ = fit_predictions(preds, scene, steps=150)
    before = np.mean([chamfer_distance(p, g) for p, g in zip(preds.instances, scene.instances)])
    after = np.mean([chamfer_distance(p, g) for p, g in zip(out.instances, scene.instances)])
    assert after < 0.5 * before


def test_plain_descent_runs():
    scene, preds = _pair(3)
    _, trace = fit_predictions(preds, scene, steps=20, backtrack=False)
    assert trace[-1] < trace[0]


def test_scores_and_classes_kept():
    scene, preds = _pair(4)
    out, _ = fit_predictions(preds, scene, steps=5)
    assert np.array_equal(out.scores, preds.scores)
    assert [p.cls for p in out.instances] == [p.cls for p in preds.instances]


def test_objective_gradient():
    rng = np.random.default_rng(0)
    pred, gt = random_open_pair(rng)
    w = LossWeights()

    def kinks(x, tol):
        return points_points_kinks(x, gt, tol) | point_line_kinks(x, gt, tol) | auxiliary_line_kinks(x, gt, tol)

    assert finite_difference_check(lambda x: point_objective(x, gt, w), pred, exclude=kinks) <= 1e-4


def test_argument_validation():
    scene, preds = _pair(0)
    with pytest.raises(ValueError):
        fit_predictions(preds, scene, steps=-1)
    with pytest.raises(ValueError):
        fit_predictions(preds, scene, lr=0)


def test_divergence_raises():
    scene, preds = _pair(0)
    with pytest.raises(DivergenceError), np.errstate(invalid="ignore"):
        fit_predictions(preds, scene, steps=1, lr=np.inf, backtrack=False)
