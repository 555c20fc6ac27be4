import numpy as np
import pytest

from prior_pose.core.error_handling import CardinalityMismatchError, ConfigurationError, NoInliersError
from prior_pose.fitter import init_params
from prior_pose.geometry import Pose9, axis_rotation, params_from_pose, random_rotation, world_location
from prior_pose.objective import (
    InlierMask,
    LossWeights,
    Problem,
    Toggles,
    Variables,
    candidate_coordinates,
    combine_terms,
    consistency_loss,
    gt_inliers,
    mask_loss,
    pose_loss,
    reconstruction_loss,
    sym_coordinate_loss,
    sym_shape_loss,
    total_loss,
)
from prior_pose.symmetry import NO_SYMMETRY, CategoryProfile, SymmetryClass, SymmetryKind, mirror_world

ROT_Y = SymmetryClass(SymmetryKind.ROTATIONAL_Y)
REFLECTION = SymmetryClass(SymmetryKind.REFLECTION_XY)


@pytest.fixture
def scene(tilted_pose, rng):
    coords = rng.uniform(-0.3, 0.3, size=(25, 3))
    observed = world_location(coords, tilted_pose)
    return coords, observed


def test_gt_inliers(tilted_pose, scene):
    coords, observed = scene
    assert gt_inliers(observed, coords, tilted_pose).labels.all()

    moved = observed.copy()
    moved[3] += np.array([0.2, 0.0, 0.0])
    labels = gt_inliers(moved, coords, tilted_pose, threshold=0.1).labels
    assert not labels[3]
    assert labels.sum() == 24


def test_gt_inliers_boundary_is_inclusive():
    pose = Pose9(np.eye(3), np.zeros(3), np.ones(3) / np.sqrt(3))
    coords = np.zeros((1, 3))
    observed = np.array([[0.0, 0.0, 0.0625]])
    assert gt_inliers(observed, coords, pose, threshold=0.0625).labels.all()


def test_pose_loss(tilted_pose):
    assert pose_loss(tilted_pose, tilted_pose, NO_SYMMETRY) == 0.0
    spun = Pose9(tilted_pose.rotation @ axis_rotation("y", 0.9), tilted_pose.translation, tilted_pose.size)
    assert pose_loss(spun, tilted_pose, ROT_Y) == pytest.approx(0.0, abs=1e-12)
    assert pose_loss(spun, tilted_pose, NO_SYMMETRY) > 0.0
    shifted = Pose9(tilted_pose.rotation, tilted_pose.translation + np.array([0.1, 0, 0]), tilted_pose.size)
    assert pose_loss(shifted, tilted_pose, NO_SYMMETRY) == pytest.approx(0.1)


def test_consistency_loss(tilted_pose, scene):
    coords, observed = scene
    everything = InlierMask.all_inliers(len(coords))
    assert consistency_loss(coords, observed, tilted_pose, everything) == pytest.approx(0.0, abs=1e-12)
    assert consistency_loss(coords + np.array([0.1, 0, 0]), observed, tilted_pose, everything) == pytest.approx(0.1)

    labels = np.ones(len(coords), dtype=bool)
    labels[:5] = False
    disturbed = coords.copy()
    disturbed[:5] += 1.0
    assert consistency_loss(disturbed, observed, tilted_pose, InlierMask.from_labels(labels)) == pytest.approx(0.0, abs=1e-12)


def test_consistency_loss_requires_inliers(tilted_pose, scene):
    coords, observed = scene
    with pytest.raises(NoInliersError):
        consistency_loss(coords, observed, tilted_pose, InlierMask.from_labels(np.zeros(len(coords), dtype=bool)))
    with pytest.raises(CardinalityMismatchError):
        consistency_loss(coords[:-1], observed, tilted_pose, InlierMask.all_inliers(len(coords)))


def test_sym_coordinate_loss_zero_on_every_candidate(tilted_pose, scene):
    _, observed = scene
    everything = InlierMask.all_inliers(len(observed))
    sym = SymmetryClass(SymmetryKind.ROTATIONAL_Y, 8)
    for candidate in candidate_coordinates(observed, tilted_pose, sym):
        assert sym_coordinate_loss(candidate, observed, tilted_pose, sym, everything) == pytest.approx(0.0, abs=1e-12)


def test_sym_coordinate_loss_orbit_invariance(tilted_pose, scene, rng):
    _, observed = scene
    everything = InlierMask.all_inliers(len(observed))
    coords = rng.uniform(-0.3, 0.3, size=observed.shape)
    turned = Pose9(tilted_pose.rotation @ axis_rotation("y", np.deg2rad(10.0)), tilted_pose.translation, tilted_pose.size)
    assert sym_coordinate_loss(coords, observed, turned, ROT_Y, everything) == pytest.approx(sym_coordinate_loss(coords, observed, tilted_pose, ROT_Y, everything), abs=1e-12)


def test_sym_coordinate_loss_bounded_by_first_candidate(tilted_pose, scene, rng):
    _, observed = scene
    everything = InlierMask.all_inliers(len(observed))
    coords = rng.uniform(-0.3, 0.3, size=observed.shape)
    plain = sym_coordinate_loss(coords, observed, tilted_pose, NO_SYMMETRY, everything)
    assert sym_coordinate_loss(coords, observed, tilted_pose, ROT_Y, everything) <= plain


def test_sym_shape_loss(rng):
    cloud = rng.normal(size=(12, 3))
    assert sym_shape_loss(cloud, cloud) == 0.0
    assert sym_shape_loss(np.zeros((1, 3)), np.array([[0.0, 0.3, 0.4]])) == pytest.approx(1.0)

    a, b = rng.normal(size=(9, 3)), rng.normal(size=(7, 3))
    distances = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    assert sym_shape_loss(a, b) == pytest.approx(distances.min(axis=1).mean() + distances.min(axis=0).mean(), abs=1e-12)


def test_reconstruction_loss(tilted_pose, scene):
    _, observed = scene
    everything = InlierMask.all_inliers(len(observed))
    assert reconstruction_loss(mirror_world(observed, tilted_pose, ROT_Y), observed, tilted_pose, ROT_Y, everything) == pytest.approx(0.0, abs=1e-12)
    assert reconstruction_loss(observed, observed, tilted_pose, NO_SYMMETRY, everything) == pytest.approx(0.0, abs=1e-12)
    offset = mirror_world(observed, tilted_pose, REFLECTION) + np.array([0.05, 0.0, 0.0])
    assert reconstruction_loss(offset, observed, tilted_pose, REFLECTION, everything) == pytest.approx(0.05)


def test_mask_loss():
    labels = InlierMask.from_labels(np.array([True, False, True, True]))
    assert mask_loss(labels.labels.astype(float), labels) == 0.0
    assert mask_loss(np.full(4, 0.5), labels) == pytest.approx(0.5)
    assert mask_loss(1.0 - labels.labels.astype(float), labels) == pytest.approx(1.0)


def test_terms_ignore_point_order(tilted_pose, scene, rng):
    coords, observed = scene
    noisy = coords + rng.normal(scale=0.02, size=coords.shape)
    order = rng.permutation(len(coords))
    everything = InlierMask.all_inliers(len(coords))
    assert consistency_loss(noisy[order], observed[order], tilted_pose, everything) == pytest.approx(consistency_loss(noisy, observed, tilted_pose, everything))
    assert sym_coordinate_loss(noisy[order], observed[order], tilted_pose, ROT_Y, everything) == pytest.approx(sym_coordinate_loss(noisy, observed, tilted_pose, ROT_Y, everything))


def test_combine_terms():
    weights = LossWeights()
    assert combine_terms({"pose": 0.1, "sp_coordinate": 0.0, "mask": 0.0, "reconstruction": 0.0, "consistency": 0.0}, weights) == pytest.approx(0.8)
    assert combine_terms({"sp_deformation_reg": 1.0}, weights) == pytest.approx(0.1)


def test_loss_weights_reject_unknown_keys():
    with pytest.raises(ConfigurationError):
        LossWeights.from_dict({"posee": 1.0})
    with pytest.raises(ConfigurationError):
        LossWeights(pose=-1.0)


def test_toggles_need_a_pose_source():
    with pytest.raises(ConfigurationError):
        Toggles(direct=False, prior=False)


def test_variables_vector_round_trip(rng):
    variables = Variables.from_vector(rng.normal(size=12 + 3 * 4 + 5 * 4 + 3 * 5 + 5), n_points=5, n_prior=4)
    again = Variables.from_vector(variables.to_vector(), n_points=5, n_prior=4)
    assert np.array_equal(again.to_vector(), variables.to_vector())
    assert again.logits.shape == (5, 4)


def _perfect_problem(rng, toggles):
    pose = Pose9(random_rotation(rng), np.array([0.0, 0.1, 0.8]), np.array([0.1, 0.15, 0.12]))
    prior = rng.uniform(-0.3, 0.3, size=(6, 3))
    profile = CategoryProfile("toy", NO_SYMMETRY, np.array([0.1, 0.15, 0.12]), prior)
    picks = rng.integers(0, 6, size=20)
    observed = world_location(prior[picks], pose)
    problem = Problem(observed, profile, InlierMask.all_inliers(20), toggles, reference=pose)
    logits = np.full((20, 6), -60.0)
    logits[np.arange(20), picks] = 60.0

    variables = Variables(params_from_pose(pose, observed, profile.mean_size), np.zeros((6, 3)), logits, observed.copy(), np.ones(20))
    return variables, problem


def test_total_loss_of_perfect_predictions(rng):
    toggles = Toggles(direct=True, prior=True, sym_losses=False, sym_recon=False, outlier_removal=True)
    variables, problem = _perfect_problem(rng, toggles)
    report = total_loss(variables, problem, LossWeights())
    for name in ("pose", "sp_coordinate", "mask", "consistency", "sp_deformation_reg"):
        assert report.terms[name] == pytest.approx(0.0, abs=1e-12)
    assert "reconstruction" not in report.active
    assert report.terms["reconstruction"] == 0.0


def test_total_is_weighted_sum_of_terms(rng, can_instance, can_profile):
    problem = Problem(can_instance.observed, can_profile, can_instance.inliers_gt, Toggles(), reference=can_instance.pose_gt)

    variables = init_params(can_instance, can_profile, "perturbed", seed=1)
    variables.logits = rng.normal(size=variables.logits.shape)
    report = total_loss(variables, problem, LossWeights())
    weights = LossWeights()
    resummed = sum(weights.term_weight(name) * report.terms[name] for name in report.active)
    assert report.total == pytest.approx(resummed, abs=1e-12)
    assert all(value >= 0 for value in report.terms.values())
    assert report.gradient.shape == variables.to_vector().shape


def test_outlier_edits_leave_inlier_terms_unchanged(rng, can_instance, can_profile):
    labels = can_instance.inliers_gt.labels.copy()
    labels[:6] = False
    toggles = Toggles(direct=True, prior=True, sym_losses=True, sym_recon=True, outlier_removal=True)
    problem = Problem(can_instance.observed, can_profile, InlierMask.from_labels(labels), toggles, reference=can_instance.pose_gt)

    variables = init_params(can_instance, can_profile, "perturbed", seed=2)
    before = total_loss(variables, problem, LossWeights(), with_gradient=False)

    variables.mirrored[:6] += 0.5
    variables.logits[:6] = rng.normal(size=(6, variables.n_prior))
    after = total_loss(variables, problem, LossWeights(), with_gradient=False)
    for name in ("sp_coordinate", "sp_shape", "reconstruction", "consistency"):
        assert after.terms[name] == pytest.approx(before.terms[name], abs=1e-12)


def test_loss_weights_reject_non_numbers():
    with pytest.raises(ConfigurationError) as excinfo:
        LossWeights.from_dict({"pose": "abc"})
    assert excinfo.value.details["key"] == "weights"
    with pytest.raises(ConfigurationError):
        LossWeights.from_dict({"mask": None})


@pytest.mark.parametrize("sym", [SymmetryClass(SymmetryKind.ROTATIONAL_Y, 36), REFLECTION], ids=["rotational", "reflection"])
def test_sym_coordinate_loss_never_exceeds_plain_loss(sym):
    rng = np.random.default_rng(17)
    for _ in range(1000):
        pose = Pose9(random_rotation(rng), rng.uniform(-0.2, 0.2, 3) + np.array([0.0, 0.0, 0.8]), rng.uniform(0.05, 0.3, 3))
        observed = world_location(rng.uniform(-0.3, 0.3, size=(16, 3)), pose)
        coords = rng.uniform(-0.3, 0.3, size=(16, 3))
        labels = rng.random(16) < 0.8
        labels[0] = True
        mask = InlierMask.from_labels(labels)
        plain = sym_coordinate_loss(coords, observed, pose, NO_SYMMETRY, mask)
        assert sym_coordinate_loss(coords, observed, pose, sym, mask) <= plain + 1e-12


def test_sym_coordinate_loss_is_constant_on_the_rotation_orbit(tilted_pose, scene, rng):
    _, observed = scene
    everything = InlierMask.all_inliers(len(observed))
    sym = SymmetryClass(SymmetryKind.ROTATIONAL_Y, 36)
    coords = rng.uniform(-0.3, 0.3, size=observed.shape)
    base = sym_coordinate_loss(coords, observed, tilted_pose, sym, everything)
    for k in range(36):
        turned = Pose9(tilted_pose.rotation @ axis_rotation("y", 2.0 * np.pi * k / 36), tilted_pose.translation, tilted_pose.size)
        assert sym_coordinate_loss(coords, observed, turned, sym, everything) == pytest.approx(base, abs=1e-12)
