import numpy as np
import pytest

from fastmap.geometry import BevGridSpec, MapClass, MapInstance, Scene
from fastmap.synth import SynthConfig, generate_scene


@pytest.fixture
def spec():
    return BevGridSpec()


@pytest.fixture
def scene():
    return generate_scene(SynthConfig(seed=7))


def line(points, cls=MapClass.DIVIDER):
    return MapInstance.of(cls, np.asarray(points, dtype=float))


def random_open_pair(rng, m=6, scale=5.0):
    gt = np.cumsum(rng.uniform(0.5, 2.0, size=(m, 2)) * rng.choice([-1, 1], size=(1, 2)), axis=0)
    pred = gt + rng.uniform(-scale / 5, scale / 5, size=gt.shape)
    return pred, gt


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
