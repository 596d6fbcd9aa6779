"""
Shared fixtures for the egcbf test suite.

Worlds and networks are kept tiny so the suite runs on a laptop; log files go
to a throwaway directory.
"""

import os
import tempfile

import numpy as np
import pytest

# ---------------------------------------------------------------------------
# Keep log files out of the working tree
# ---------------------------------------------------------------------------
os.environ.setdefault("LOG_DIR", tempfile.mkdtemp(prefix="egcbf-test-logs-"))
os.environ.setdefault("EGCBF_LOG_LEVEL", "WARNING")

from egcbf.config import EvalConfig, ExperimentConfig, ModelConfig, NetConfig, TrainConfig  # noqa: E402
from egcbf.models.dynamics import build_model  # noqa: E402
from egcbf.models.world import WorldConfig  # noqa: E402
from egcbf.services.egformer import NetSpec, init_params  # noqa: E402


# ---------------------------------------------------------------------------
# Test configuration
# ---------------------------------------------------------------------------
class TestSettings:
    """Process settings for testing: no config file, quiet logs, one worker."""

    __test__ = False

    LOG_LEVEL = "WARNING"
    CONFIG_PATH = "/nonexistent/experiment.toml"
    OUTPUT_DIR = "runs-test"
    WORKERS = 1
    DEBUG_MODE = False

    @classmethod
    def validate(cls):
        pass  # Skip validation in tests


SMALL_WORLD = WorldConfig(
    side_length=1.5,
    num_agents=3,
    num_obstacles=2,
    safety_radius=0.05,
    sensing_range=0.5,
    comm_range=1.0,
    lidar_rays=8,
    episode_len=5,
)
SMALL_NET = NetConfig(d_model=8, d_ff=16, layers=1, head_hidden=8)


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------
@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def small_world():
    return SMALL_WORLD


@pytest.fixture()
def quad_model():
    return build_model(ModelConfig(system="quadrotor"))


@pytest.fixture()
def di_model():
    return build_model(ModelConfig(system="double_integrator"))


@pytest.fixture()
def make_params():
    """Factory: small random network parameters for a model and trunk."""

    def factory(model, trunk="equivariant", seed=0):
        spec = NetSpec.from_configs(SMALL_NET.model_copy(update={"trunk": trunk}), model)
        return init_params(spec, seed)

    return factory


@pytest.fixture()
def scene(rng):
    """Factory: a random scene (tilted, moving agents) for a system."""
    from egcbf.services.checks import random_scene

    def factory(system, world=SMALL_WORLD):
        return random_scene(system, rng, world)

    return factory


@pytest.fixture()
def tiny_experiment():
    """Double-integrator experiment small enough to train for a couple of iterations."""
    return ExperimentConfig(
        world=SMALL_WORLD,
        model=ModelConfig(system="double_integrator"),
        net=SMALL_NET,
        train=TrainConfig(
            iterations=2,
            collect_every=10,
            collect_steps=6,
            batch_size=8,
            label_horizon=3,
            exploration_prob=0.0,
            explore_label_stride=2,
            reference="nominal",
            eval_every=1,
            eval_episodes=1,
        ),
        eval=EvalConfig(episodes=1, swarm_sizes=(2,), side_length=1.5, methods=("nominal",), plot=False),
    )
