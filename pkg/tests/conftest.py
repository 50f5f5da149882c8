import numpy as np
import pytest

from nebpcl.scenario import MeasurementModel, MotionModel, ScenarioConfig, generate_realization


def tiny_config(num_agents=3, anchors=((0.0, 0.0),), num_steps=2, radius=50.0, seed=0, **kw):
    """Small fully connected scenario used by many tests."""
    return ScenarioConfig(
        num_agents=num_agents,
        num_steps=num_steps,
        area=kw.pop("area", ((0.0, 20.0), (0.0, 20.0))),
        placement_area=kw.pop("placement_area", ((2.0, 18.0), (2.0, 18.0))),
        anchors=anchors,
        motion=kw.pop("motion", MotionModel()),
        measurement=kw.pop("measurement", MeasurementModel(range_noise_std=1.0, connectivity_radius=radius)),
        rng_seed=seed,
        **kw,
    )


@pytest.fixture
def tiny_realization():
    return generate_realization(tiny_config(), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
