import numpy as np
import pytest

from prior_pose.core.error_handling import ConfigurationError, EmptyCloudError, NonPositiveSizeError
from prior_pose.geometry import Pose9, axis_rotation
from prior_pose.symmetry import (
    CATEGORY_SYMMETRY,
    NO_SYMMETRY,
    CategoryProfile,
    SymmetryClass,
    SymmetryKind,
    candidate_rotations,
    mirror_point,
    mirror_world,
)

ROT_Y = SymmetryClass(SymmetryKind.ROTATIONAL_Y)
REFLECTION = SymmetryClass(SymmetryKind.REFLECTION_XY)


def test_mirror_point_table():
    p = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(mirror_point(p, ROT_Y), [-1, 2, -3])
    assert np.array_equal(mirror_point(p, REFLECTION), [1, 2, -3])
    assert np.array_equal(mirror_point(p, NO_SYMMETRY), [1, 2, 3])


def test_mirror_world_identity_pose(identity_pose):
    assert np.allclose(mirror_world(np.array([1.0, 2.0, 3.0]), identity_pose, ROT_Y), [-1, 2, -3])


def test_mirror_world_without_symmetry_is_identity(tilted_pose, rng):
    points = rng.normal(size=(10, 3))
    assert np.allclose(mirror_world(points, tilted_pose, NO_SYMMETRY), points)


def test_mirror_world_fixes_symmetry_axis():
    pose = Pose9(axis_rotation("y", np.pi / 2), np.zeros(3), np.ones(3))
    p = np.array([0.0, 0.7, 0.0])
    assert np.allclose(mirror_world(p, pose, ROT_Y), p)


def test_mirror_world_is_an_involution(tilted_pose, rng):
    points = rng.normal(size=(10, 3))
    for sym in (ROT_Y, REFLECTION):
        assert np.allclose(mirror_world(mirror_world(points, tilted_pose, sym), tilted_pose, sym), points)


def test_candidate_rotations_quarter_turns():
    candidates = candidate_rotations(np.eye(3), SymmetryClass(SymmetryKind.ROTATIONAL_Y, 4))
    assert len(candidates) == 4
    for k, candidate in enumerate(candidates):
        assert np.allclose(candidate, axis_rotation("y", k * np.pi / 2))


def test_candidate_rotations_start_with_gt(tilted_pose):
    assert np.array_equal(candidate_rotations(tilted_pose.rotation, ROT_Y)[0], tilted_pose.rotation)
    assert len(candidate_rotations(tilted_pose.rotation, NO_SYMMETRY)) == 1
    assert len(candidate_rotations(tilted_pose.rotation, REFLECTION)) == 1


def test_candidate_rotations_closed_under_orbit():
    ten = np.deg2rad(10.0)
    candidates = candidate_rotations(axis_rotation("y", ten), ROT_Y)
    expected = [axis_rotation("y", ten * (k + 1)) for k in range(36)]
    for rotation in expected:
        assert any(np.allclose(rotation, c) for c in candidates)


def test_candidate_count_forced_to_one_without_rotational_symmetry():
    assert SymmetryClass(SymmetryKind.REFLECTION_XY, 36).candidate_count == 1
    with pytest.raises(ConfigurationError):
        SymmetryClass(SymmetryKind.ROTATIONAL_Y, 0)


def test_symmetry_class_dict_round_trip():
    sym = SymmetryClass(SymmetryKind.ROTATIONAL_Y, 12)
    assert SymmetryClass.from_dict(sym.to_dict()) == sym
    with pytest.raises(ConfigurationError):
        SymmetryClass.from_dict({"kind": "spherical"})


def test_category_profile_validation():
    with pytest.raises(EmptyCloudError):
        CategoryProfile("empty", NO_SYMMETRY, np.ones(3), np.zeros((0, 3)))
    with pytest.raises(NonPositiveSizeError):
        CategoryProfile("flat", NO_SYMMETRY, np.array([0.1, 0.0, 0.1]), np.zeros((4, 3)))


def test_category_table():
    assert CATEGORY_SYMMETRY["can"] is SymmetryKind.ROTATIONAL_Y
    assert CATEGORY_SYMMETRY["laptop"] is SymmetryKind.REFLECTION_XY
    assert CATEGORY_SYMMETRY["camera"] is SymmetryKind.NONE
