import numpy as np
import pytest

from ipmdiff import simulator as sim


@pytest.fixture(scope="session")
def small_model():
    """Tiny nets with zero heads: physics identical to the full-size untrained model."""
    return sim.PhysicsModel.build(0, lstm_hidden=8, rod_hidden=(8, 8), inta_hidden=(8, 8))


@pytest.fixture(scope="session")
def full_model():
    return sim.PhysicsModel.build(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
