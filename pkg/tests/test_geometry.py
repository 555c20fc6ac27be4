import numpy as np
import pytest

from prior_pose.core.error_handling import DegenerateInputError, EmptyCloudError, NonFiniteValueError, NonPositiveSizeError
from prior_pose.geometry import (
    Pose9,
    PoseGradient,
    PoseParams,
    axis_rotation,
    centroid,
    is_rotation,
    nocs_coordinate,
    nocs_coordinate_vjp,
    params_from_pose,
    pose_from_params,
    pose_params_vjp,
    random_rotation,
    recover_rotation,
    recover_size,
    recover_translation,
    world_location,
)
from prior_pose.gradcheck import finite_difference, relative_error


def _params(rx, ry):
    return PoseParams(np.asarray(rx, dtype=float), np.asarray(ry, dtype=float), np.zeros(3), np.zeros(3))


def test_recover_rotation_canonical_basis():
    assert np.allclose(recover_rotation(_params([1, 0, 0], [0, 1, 0])), np.eye(3))


def test_recover_rotation_removes_y_component_from_rx():
    assert np.allclose(recover_rotation(_params([1, 1, 0], [0, 1, 0])), np.eye(3))


def test_recover_rotation_keeps_ry_direction(rng):
    for _ in range(20):
        rx, ry = rng.normal(size=3), rng.normal(size=3)
        rotation = recover_rotation(_params(rx, ry))
        assert is_rotation(rotation)
        assert np.allclose(rotation[:, 1], ry / np.linalg.norm(ry))


def test_recover_rotation_parallel_columns():
    with pytest.raises(DegenerateInputError):
        recover_rotation(_params([0, 1, 0], [0, 2, 0]))


def test_recover_rotation_vanishing_column():
    with pytest.raises(DegenerateInputError):
        recover_rotation(_params([1, 0, 0], [0, 1e-9, 0]))


def test_recover_translation_examples():
    assert np.allclose(recover_translation(np.zeros(3), np.array([[1, 0, 0], [3, 0, 0]])), [2, 0, 0])
    assert np.allclose(recover_translation(np.array([0, 0, 0.5]), np.zeros((1, 3))), [0, 0, 0.5])
    assert np.allclose(recover_translation(np.array([0.1, -0.1, 0]), np.array([[1, 1, 1], [-1, -1, -1]])), [0.1, -0.1, 0])


def test_recover_size_examples():
    mean_size = np.array([0.1, 0.2, 0.1])
    assert np.allclose(recover_size(np.zeros(3), mean_size), mean_size)
    assert np.allclose(recover_size(np.array([0.02, -0.01, 0]), mean_size), [0.12, 0.19, 0.1])
    with pytest.raises(NonPositiveSizeError):
        recover_size(np.array([-0.2, 0, 0]), mean_size)


def test_centroid_of_empty_cloud():
    with pytest.raises(EmptyCloudError):
        centroid(np.zeros((0, 3)))


def test_pose9_validation():
    with pytest.raises(NonPositiveSizeError):
        Pose9(np.eye(3), np.zeros(3), np.array([0.1, 0.0, 0.1]))
    with pytest.raises(NonFiniteValueError) as excinfo:
        Pose9(np.eye(3), np.array([np.nan, 0, 0]), np.ones(3))
    assert excinfo.value.details["component"] == "translation"
    with pytest.raises(NonFiniteValueError) as excinfo:
        Pose9(np.eye(3), np.zeros(3), np.array([0.1, np.inf, 0.1]))
    assert excinfo.value.details["component"] == "size"


def test_pose9_dict_round_trip(tilted_pose):
    restored = Pose9.from_dict(tilted_pose.to_dict())
    assert np.array_equal(restored.rotation, tilted_pose.rotation)
    assert np.array_equal(restored.translation, tilted_pose.translation)
    assert np.array_equal(restored.size, tilted_pose.size)


def test_nocs_coordinate_examples():
    unit = Pose9(np.eye(3), np.zeros(3), np.ones(3) / np.sqrt(3))
    assert np.allclose(nocs_coordinate(np.array([0.3, 0.1, 0]), unit), [0.3, 0.1, 0])

    size = np.full(3, 2.0 / np.sqrt(3))
    pose = Pose9(axis_rotation("z", np.pi / 2), np.array([0, 0, 1.0]), size)
    assert np.allclose(nocs_coordinate(np.array([0, 0, 1.0]), pose), [0, 0, 0])
    assert np.allclose(nocs_coordinate(np.array([1.0, 0, 1.0]), pose), [0, -0.5, 0])


def test_world_location_inverts_nocs(tilted_pose, rng):
    assert np.allclose(world_location(np.zeros(3), tilted_pose), tilted_pose.translation)
    points = rng.normal(size=(30, 3))
    assert np.allclose(world_location(nocs_coordinate(points, tilted_pose), tilted_pose), points)


def test_world_location_inverts_nocs_for_many_poses():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        pose = Pose9(random_rotation(rng), rng.uniform(-1.0, 1.0, 3), rng.uniform(0.05, 0.5, 3))
        points = rng.uniform(-1.0, 1.0, (100, 3))
        restored = world_location(nocs_coordinate(points, pose), pose)
        worst = max(worst, float(np.max(np.abs(restored - points) / np.maximum(np.abs(points), 1.0))))
    assert worst < 1e-12


def test_params_round_trip(tilted_pose, rng):
    cloud = rng.normal(size=(40, 3)) * 0.05 + tilted_pose.translation
    mean_size = np.array([0.1, 0.1, 0.1])
    pose = pose_from_params(params_from_pose(tilted_pose, cloud, mean_size), cloud, mean_size)
    assert np.allclose(pose.rotation, tilted_pose.rotation)
    assert np.allclose(pose.translation, tilted_pose.translation)
    assert np.allclose(pose.size, tilted_pose.size)


def test_pose_params_vjp_matches_finite_differences(rng):
    cloud = rng.normal(size=(20, 3))
    mean_size = np.array([0.2, 0.3, 0.25])
    weights = PoseGradient(rng.normal(size=(3, 3)), rng.normal(size=3), rng.normal(size=3))

    def objective(vector):
        pose = pose_from_params(PoseParams.from_vector(vector), cloud, mean_size)
        return np.sum(weights.rotation * pose.rotation) + weights.translation @ pose.translation + weights.size @ pose.size

    x = np.concatenate([rng.normal(size=6), rng.normal(size=3) * 0.1, np.full(3, 0.01)])
    analytic = pose_params_vjp(PoseParams.from_vector(x), weights).to_vector()
    assert relative_error(analytic, finite_difference(objective, x)) < 1e-6


def test_nocs_coordinate_vjp_matches_finite_differences(rng):
    rotation = random_rotation(rng)
    points = rng.normal(size=(15, 3))
    grad_coords = rng.normal(size=(15, 3))

    def objective(vector):
        pose = Pose9(rotation, vector[:3], vector[3:])
        return np.sum(grad_coords * nocs_coordinate(points, pose))

    x = np.concatenate([rng.normal(size=3), rng.uniform(0.1, 0.3, 3)])
    grad = nocs_coordinate_vjp(points, Pose9(rotation, x[:3], x[3:]), grad_coords)
    assert relative_error(np.concatenate([grad.translation, grad.size]), finite_difference(objective, x)) < 1e-6
