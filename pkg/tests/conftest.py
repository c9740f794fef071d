import os
import sys

import hypothesis
import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.envs.deepsea import DeepSeaSpec, build_deepsea  # noqa: E402
from src.envs.random_mdp import build_random_mdp  # noqa: E402

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=100, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))


@pytest.fixture
def small_mdp():
    return build_random_mdp(5, 3, seed=0, discount=0.9)


@pytest.fixture
def pi_mdp():
    return build_random_mdp(10, 4, seed=1, discount=0.9)


@pytest.fixture
def deepsea8():
    return build_deepsea(DeepSeaSpec(grid_size=8, slip_prob=0.0, discount=0.9))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
