import numpy as np
import pytest
from rhflow.core.config import Config
from rhflow.core.grid_tensor import GridGeometry, TargetSpec
from rhflow.core.initial_data import random_map, random_metric
from rhflow.utils.cache import LRUCache
from rhflow.utils.result import Result

@pytest.fixture
def config():
    return Config("tests/test_config.yaml")

@pytest.fixture
def result():
    return Result

@pytest.fixture
def cache():
    return LRUCache(max_size=16)

@pytest.fixture
def torus2():
    return GridGeometry(2, 16)

@pytest.fixture
def sphere_target():
    return TargetSpec.sphere()

@pytest.fixture
def flat_target():
    return TargetSpec.flat_scalar()

@pytest.fixture
def smooth_fixture(torus2, sphere_target):
    """A slightly perturbed metric and a generic map into S², both smooth and periodic."""
    rng = np.random.default_rng(7)
    g = random_metric(torus2, 0.05, rng)
    phi = random_map(torus2, sphere_target, 0.3, rng)
    return torus2, g, phi, sphere_target
