import numpy as np
import pytest

from safe_mpcrl.env import DoubleIntegrator, LinearMotion, Obstacle, World


@pytest.fixture
def static_world():
    """The single static obstacle task."""
    return World(DoubleIntegrator(0.2), (Obstacle(2.0, 2.25, 1.5),))


@pytest.fixture
def dynamic_world():
    """One static and two moving obstacles."""
    return World(
        DoubleIntegrator(0.2),
        (
            Obstacle(-2.0, 0.0, 1.0),
            Obstacle(-4.0, -1.5, 0.7, LinearMotion(-4.0, 0.0, 0.2, 1)),
            Obstacle(-4.0, -3.3, 0.7, LinearMotion(-4.0, 1.0, 0.2, 1)),
        ),
    )


@pytest.fixture
def rng():
    """A seeded generator."""
    return np.random.default_rng(1234)
