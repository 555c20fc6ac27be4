import numpy as np
import pytest

from prior_pose.core.error_handling import CardinalityMismatchError, ConfigurationError, DegenerateConfigurationError, NoConsensusError
from prior_pose.geometry import Pose9, axis_rotation, nocs_coordinate, random_rotation
from prior_pose.metrics import rotation_error
from prior_pose.similarity import RansacConfig, pose_from_nocs, umeyama, umeyama_ransac
from prior_pose.symmetry import NO_SYMMETRY


def test_umeyama_identity(rng):
    source = rng.normal(size=(20, 3))
    transform = umeyama(source, source)
    assert transform.scale == pytest.approx(1.0)
    assert np.allclose(transform.rotation, np.eye(3))
    assert np.allclose(transform.translation, 0.0)


def test_umeyama_recovers_planted_transform(rng):
    source = rng.normal(size=(50, 3))
    rotation = axis_rotation("z", np.pi / 2)
    target = 2.0 * source @ rotation.T + np.array([1.0, 0.0, 0.0])
    transform = umeyama(source, target)
    assert abs(transform.scale - 2.0) < 1e-10
    assert np.allclose(transform.rotation, rotation, atol=1e-10)
    assert np.allclose(transform.translation, [1.0, 0.0, 0.0], atol=1e-10)


def test_umeyama_collinear_points():
    source = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    with pytest.raises(DegenerateConfigurationError):
        umeyama(source, source)


def test_umeyama_mismatched_clouds(rng):
    with pytest.raises(CardinalityMismatchError):
        umeyama(rng.normal(size=(5, 3)), rng.normal(size=(6, 3)))


def test_ransac_without_outliers_matches_umeyama(rng):
    source = rng.normal(size=(40, 3))
    target = 0.5 * source @ random_rotation(rng).T + 0.3
    direct = umeyama(source, target)
    robust, mask = umeyama_ransac(source, target, RansacConfig())
    assert mask.all()
    assert robust.scale == pytest.approx(direct.scale)
    assert np.allclose(robust.rotation, direct.rotation)
    assert np.allclose(robust.translation, direct.translation)


def test_ransac_rejects_planted_outliers(rng):
    source = rng.uniform(-0.5, 0.5, size=(100, 3))
    rotation = random_rotation(rng)
    target = 0.3 * source @ rotation.T + np.array([0.1, 0.2, 0.7])
    corrupted = rng.choice(100, size=30, replace=False)
    low, high = target.min(axis=0), target.max(axis=0)
    target[corrupted] = rng.uniform(low, high, size=(30, 3))
    truth = np.ones(100, dtype=bool)
    truth[corrupted] = np.linalg.norm(target[corrupted] - (0.3 * source[corrupted] @ rotation.T + np.array([0.1, 0.2, 0.7])), axis=1) <= 0.01

    transform, mask = umeyama_ransac(source, target, RansacConfig(inlier_threshold=0.01, seed=1))
    assert rotation_error(transform.rotation, rotation, NO_SYMMETRY) < 0.5
    assert np.array_equal(mask, truth)


def test_ransac_without_consensus(rng):
    source = rng.normal(size=(30, 3))
    target = rng.normal(size=(30, 3)) * 10.0
    with pytest.raises(NoConsensusError):
        umeyama_ransac(source, target, RansacConfig(inlier_threshold=1e-6, max_iterations=50))


def test_ransac_config_validation():
    with pytest.raises(ConfigurationError):
        RansacConfig(inlier_threshold=0.0)
    with pytest.raises(ConfigurationError):
        RansacConfig(min_sample_size=2)


def test_pose_from_exact_nocs(tilted_pose, rng):
    half = 0.5 * tilted_pose.size / tilted_pose.diagonal
    coords = rng.uniform(-1.0, 1.0, size=(200, 3)) * half
    coords[0], coords[1] = half, -half
    observed = tilted_pose.diagonal * coords @ tilted_pose.rotation.T + tilted_pose.translation
    assert np.allclose(nocs_coordinate(observed, tilted_pose), coords)

    pose, mask = pose_from_nocs(coords, observed, RansacConfig())
    assert mask.all()
    assert rotation_error(pose.rotation, tilted_pose.rotation, NO_SYMMETRY) < 1e-6
    assert np.linalg.norm(pose.translation - tilted_pose.translation) < 1e-9
    assert np.allclose(pose.size, tilted_pose.size)


def test_pose_from_nocs_excludes_corrupted_points(rng):
    pose_gt = Pose9(random_rotation(rng), np.array([0.0, 0.0, 0.6]), np.array([0.2, 0.1, 0.15]))
    coords = rng.uniform(-0.3, 0.3, size=(10, 3))
    observed = pose_gt.diagonal * coords @ pose_gt.rotation.T + pose_gt.translation
    observed[:4] += np.array([0.2, -0.15, 0.1])

    _, mask = pose_from_nocs(coords, observed, RansacConfig(inlier_threshold=0.01, max_iterations=500))
    assert not mask[:4].any()
    assert mask[4:].all()


def test_ransac_recovers_rotation_across_seeds():
    rng = np.random.default_rng(21)
    errors = []
    for trial in range(200):
        source = rng.uniform(-0.5, 0.5, size=(100, 3))
        rotation = random_rotation(rng)
        target = 0.3 * source @ rotation.T + rng.uniform(-0.2, 0.2, 3) + rng.normal(0.0, 0.001, (100, 3))
        corrupted = rng.choice(100, size=30, replace=False)
        target[corrupted] = rng.uniform(target.min(axis=0), target.max(axis=0), size=(30, 3))
        transform, _ = umeyama_ransac(source, target, RansacConfig(inlier_threshold=0.01, seed=trial))
        errors.append(rotation_error(transform.rotation, rotation, NO_SYMMETRY))
    assert np.mean(np.array(errors) < 0.5) >= 0.95


def test_pose_from_noisy_nocs():
    rng = np.random.default_rng(8)
    errors = []
    for trial in range(100):
        pose_gt = Pose9(random_rotation(rng), rng.uniform(-0.2, 0.2, 3) + np.array([0.0, 0.0, 0.8]), rng.uniform(0.1, 0.3, 3))
        half = 0.5 * pose_gt.size / pose_gt.diagonal
        clean = rng.uniform(-1.0, 1.0, size=(1024, 3)) * half
        observed = pose_gt.diagonal * clean @ pose_gt.rotation.T + pose_gt.translation
        coords = clean + rng.normal(0.0, 0.01, clean.shape)
        pose, _ = pose_from_nocs(coords, observed, RansacConfig(seed=trial))
        errors.append(rotation_error(pose.rotation, pose_gt.rotation, NO_SYMMETRY))
    assert np.median(errors) < 2.0


def test_partial_view_underestimates_size_only(tilted_pose, rng):
    half = 0.5 * tilted_pose.size / tilted_pose.diagonal
    coords = rng.uniform(-1.0, 1.0, size=(200, 3)) * half * np.array([0.5, 1.0, 1.0])
    coords[0], coords[1] = half * np.array([0.5, 1.0, 1.0]), -half * np.array([0.5, 1.0, 1.0])
    observed = tilted_pose.diagonal * coords @ tilted_pose.rotation.T + tilted_pose.translation

    pose, _ = pose_from_nocs(coords, observed, RansacConfig())
    assert rotation_error(pose.rotation, tilted_pose.rotation, NO_SYMMETRY) < 1e-6
    assert np.linalg.norm(pose.translation - tilted_pose.translation) < 1e-9
    assert pose.size[0] == pytest.approx(0.5 * tilted_pose.size[0])
    assert np.allclose(pose.size[1:], tilted_pose.size[1:])
