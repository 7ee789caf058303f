"""Shared fixtures: a desk-scale scene family small enough for fast rollouts."""
import numpy as np
import pytest

from src.budget_engine import BudgetConfig
from src.rollout_env import EpisodeConfig
from src.synthetic_scenes import SceneSet, SceneSpec, generate_scene

# 1344 px canvas, 4 x 4 grid of 336 px cells, 4 classes.
# Training law budget is 368 tokens (532 px glimpse, scale ~0.4);
# at B=256 the glimpse is 448 px (scale 1/3). A cell crop is 144 tokens.
DESK_SPEC = SceneSpec(canvas=1344, grid=4, glyph_size=16, num_classes=4, distractor_density=0.3)


@pytest.fixture(scope="session")
def desk_spec():
    return DESK_SPEC


@pytest.fixture
def desk_scene():
    return generate_scene(DESK_SPEC, 7)


@pytest.fixture
def desk_scenes():
    return SceneSet.from_range(DESK_SPEC, 0, 8)


@pytest.fixture
def env_config():
    return EpisodeConfig()


@pytest.fixture
def fixed_budget_config():
    return EpisodeConfig(max_turns=3, fixed_budget_override=256)


@pytest.fixture
def unconstrained_config():
    return EpisodeConfig(constrained=False)


@pytest.fixture
def budget_config():
    return BudgetConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
