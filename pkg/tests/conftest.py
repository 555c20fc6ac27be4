import json

import numpy as np
import pytest

from prior_pose.geometry import Pose9, axis_rotation
from prior_pose.synthgen import get_shape, make_instance, make_prior


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def identity_pose():
    return Pose9(np.eye(3), np.zeros(3), np.array([0.1, 0.2, 0.3]))


@pytest.fixture
def tilted_pose():
    return Pose9(axis_rotation("x", 0.4) @ axis_rotation("y", 1.1), np.array([0.05, -0.1, 0.8]), np.array([0.12, 0.08, 0.1]))


@pytest.fixture
def can_profile():
    return make_prior(get_shape("can"), population=4, points=24, seed=0)


@pytest.fixture
def camera_profile():
    return make_prior(get_shape("camera"), population=4, points=24, seed=0)


@pytest.fixture
def can_instance():
    return make_instance(get_shape("can"), seed=3, n_points=64)


@pytest.fixture
def camera_instance():
    return make_instance(get_shape("camera"), seed=5, n_points=64)


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(
        json.dumps(
            {
                "categories": ["can", "camera"],
                "count": 2,
                "points": 48,
                "prior_points": 12,
                "prior_population": 3,
                "preset": "D",
                "init_scheme": "perturbed",
                "max_steps": 3,
                "seed": 7,
            }
        )
    )
    return path
