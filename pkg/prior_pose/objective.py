"""Loss terms of the joint pose/shape objective with hand-derived gradients.

Every kernel comes in two flavours: a value function and an ``*_and_grad`` variant that also
returns gradients with respect to its array inputs and, through PoseGradient, the pose it reads.
`total_loss` assembles the active terms for a Problem and chains everything back onto the flat
optimization vector held by `Variables`.
"""

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .core.error_handling import CardinalityMismatchError, ConfigurationError, EmptyCloudError, NoInliersError
from .geometry import Pose9, PoseGradient, PoseParams, axis_rotation, nocs_coordinate, nocs_coordinate_vjp, pose_from_params, pose_params_vjp, world_location
from .prior import deform, deformation_regularizer_and_grad, matching_from_logits, matching_regularizer_logits_and_grad, softmax_vjp
from .symmetry import NO_SYMMETRY, CategoryProfile, SymmetryClass, SymmetryKind, candidate_rotations, mirror_point, mirror_world

DEFAULT_INLIER_THRESHOLD = 0.1

TERM_NAMES = (
    "pose",
    "sp_coordinate",
    "sp_shape",
    "sp_deformation_reg",
    "sp_matching_reg",
    "mask",
    "reconstruction",
    "consistency",
)


@dataclass(frozen=True)
class LossWeights:
    """Outer weights of the five loss groups plus the inner regularizer weights of the shape-prior group."""

    pose: float = 8.0
    shape_prior: float = 10.0
    mask: float = 1.0
    reconstruction: float = 1.0
    consistency: float = 1.0
    deformation_reg: float = 0.01
    matching_reg: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (math.isfinite(value) and value >= 0):
                raise ConfigurationError(f"Loss weight {f.name} must be finite and non-negative", details={"key": f"weights.{f.name}", "value": value})

    def term_weight(self, name: str) -> float:
        if name == "pose":
            return self.pose
        if name in ("sp_coordinate", "sp_shape"):
            return self.shape_prior
        if name == "sp_deformation_reg":
            return self.shape_prior * self.deformation_reg
        if name == "sp_matching_reg":
            return self.shape_prior * self.matching_reg
        if name == "mask":
            return self.mask
        if name == "reconstruction":
            return self.reconstruction
        if name == "consistency":
            return self.consistency
        raise ConfigurationError(f"Unknown loss term: {name}")

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LossWeights":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"Unknown weight key: {unknown[0]}", details={"key": f"weights.{unknown[0]}"})
        try:
            return cls(**{k: float(v) for k, v in data.items()})
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"Loss weights must be numbers: {e}", details={"key": "weights"})


@dataclass(frozen=True)
class Toggles:
    direct: bool = True
    prior: bool = True
    sym_losses: bool = True
    sym_recon: bool = True
    outlier_removal: bool = True

    def __post_init__(self):
        if not (self.direct or self.prior):
            raise ConfigurationError("At least one of direct/prior must be enabled", details={"key": "toggles"})

    def to_dict(self) -> Dict[str, bool]:
        return asdict(self)


@dataclass(frozen=True)
class InlierMask:
    labels: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=bool).reshape(-1)
        scores = np.asarray(self.scores, dtype=float).reshape(-1)
        if labels.shape != scores.shape:
            raise CardinalityMismatchError("Mask labels and scores differ in size", details={"labels": len(labels), "scores": len(scores)})
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "scores", np.clip(scores, 0.0, 1.0))

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "InlierMask":
        labels = np.asarray(labels, dtype=bool)
        return cls(labels, labels.astype(float))

    @classmethod
    def all_inliers(cls, n: int) -> "InlierMask":
        return cls.from_labels(np.ones(n, dtype=bool))

    @property
    def inlier_count(self) -> int:
        return int(self.labels.sum())

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Variables:
    """Everything the fitter optimizes; flattened in the order of `block_slices`."""

    params: PoseParams
    deformation: np.ndarray
    logits: np.ndarray
    mirrored: np.ndarray
    mask_raw: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.mirrored)

    @property
    def n_prior(self) -> int:
        return len(self.deformation)

    @staticmethod
    def block_slices(n_points: int, n_prior: int) -> Dict[str, slice]:
        sizes = [("pose", 12), ("deformation", 3 * n_prior), ("logits", n_points * n_prior), ("mirrored", 3 * n_points), ("mask_raw", n_points)]
        slices = {}
        start = 0
        for name, size in sizes:
            slices[name] = slice(start, start + size)
            start += size
        return slices

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.params.to_vector(),
                self.deformation.reshape(-1),
                self.logits.reshape(-1),
                self.mirrored.reshape(-1),
                self.mask_raw.reshape(-1),
            ]
        )

    @classmethod
    def from_vector(cls, vector: np.ndarray, n_points: int, n_prior: int) -> "Variables":
        s = cls.block_slices(n_points, n_prior)
        return cls(
            params=PoseParams.from_vector(vector[s["pose"]]),
            deformation=vector[s["deformation"]].reshape(n_prior, 3),
            logits=vector[s["logits"]].reshape(n_points, n_prior),
            mirrored=vector[s["mirrored"]].reshape(n_points, 3),
            mask_raw=vector[s["mask_raw"]].copy(),
        )


@dataclass
class Problem:
    """One instance as the objective sees it.

    ``reference`` is the pose filling the ground-truth slots of the loss terms. ``None`` means
    self-supervision: the current predicted pose is the reference and gradients flow through it.
    """

    observed: np.ndarray
    profile: CategoryProfile
    labels: InlierMask
    toggles: Toggles
    reference: Optional[Pose9] = None
    centroid: np.ndarray = field(init=False)

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=float).reshape(-1, 3)
        if len(self.observed) == 0:
            raise EmptyCloudError("Observed cloud is empty")
        if len(self.labels) != len(self.observed):
            raise CardinalityMismatchError("Mask does not match the observed cloud", details={"mask": len(self.labels), "observed": len(self.observed)})
        self.centroid = self.observed.mean(axis=0)

    @property
    def self_supervised(self) -> bool:
        return self.reference is None


@dataclass
class LossReport:
    terms: Dict[str, float]
    total: float
    active: Tuple[str, ...]
    pose: Pose9
    coords: Optional[np.ndarray] = None
    gradient: Optional[np.ndarray] = None
    term_gradients: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"terms": dict(self.terms), "total": self.total, "active": list(self.active)}


def _inlier_rows(mask: InlierMask) -> np.ndarray:
    rows = np.flatnonzero(mask.labels)
    if len(rows) == 0:
        raise NoInliersError("Inlier mask is empty")
    return rows


def _check_paired(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if len(a) != len(b):
        raise CardinalityMismatchError(f"{what}: point counts differ", details={"left": len(a), "right": len(b)})


def _l1_mean_and_grad(diff: np.ndarray, rows: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean over `rows` of the per-point L1 norm of `diff`, and its gradient w.r.t. `diff`."""
    value = float(np.abs(diff[rows]).sum(axis=1).mean())
    grad = np.zeros_like(diff)
    grad[rows] = np.sign(diff[rows]) / len(rows)
    return value, grad


def gt_inliers(observed: np.ndarray, coords_gt: np.ndarray, pose_gt: Pose9, threshold: float = DEFAULT_INLIER_THRESHOLD) -> InlierMask:
    """A point is an outlier iff it lies farther than `threshold` from its ground-truth location."""
    observed = np.asarray(observed, dtype=float).reshape(-1, 3)
    coords_gt = np.asarray(coords_gt, dtype=float).reshape(-1, 3)
    _check_paired(observed, coords_gt, "gt_inliers")
    residual = np.linalg.norm(observed - world_location(coords_gt, pose_gt), axis=1)
    return InlierMask.from_labels(residual <= threshold)


def pose_loss_and_grad(pred: Pose9, gt: Pose9, sym: SymmetryClass) -> Tuple[float, PoseGradient]:
    dt = pred.translation - gt.translation
    ds = pred.size - gt.size
    dR = pred.rotation - gt.rotation
    columns = [1] if sym.kind is SymmetryKind.ROTATIONAL_Y else [0, 1]

    value = float(np.abs(dt).sum() + np.abs(ds).sum() + np.abs(dR[:, columns]).sum())
    grad_rotation = np.zeros((3, 3))
    grad_rotation[:, columns] = np.sign(dR[:, columns])
    return value, PoseGradient(grad_rotation, np.sign(dt), np.sign(ds))


def pose_loss(pred: Pose9, gt: Pose9, sym: SymmetryClass) -> float:
    return pose_loss_and_grad(pred, gt, sym)[0]


def consistency_loss_and_grad(coords_pred: np.ndarray, observed: np.ndarray, pose_pred: Pose9, mask: InlierMask) -> Tuple[float, np.ndarray, PoseGradient]:
    _check_paired(coords_pred, observed, "consistency_loss")
    rows = _inlier_rows(mask)
    diff = nocs_coordinate(observed, pose_pred) - coords_pred
    value, grad = _l1_mean_and_grad(diff, rows)
    return value, -grad, nocs_coordinate_vjp(observed, pose_pred, grad)


def consistency_loss(coords_pred: np.ndarray, observed: np.ndarray, pose_pred: Pose9, mask: InlierMask) -> float:
    return consistency_loss_and_grad(coords_pred, observed, pose_pred, mask)[0]


def candidate_coordinates(observed: np.ndarray, pose_gt: Pose9, sym: SymmetryClass) -> List[np.ndarray]:
    """NOCS coordinates of `observed` under every candidate ground-truth rotation."""
    return [nocs_coordinate(observed, Pose9(rotation, pose_gt.translation, pose_gt.size)) for rotation in candidate_rotations(pose_gt.rotation, sym)]


def sym_coordinate_loss_and_grad(
    coords_pred: np.ndarray, observed: np.ndarray, pose_gt: Pose9, sym: SymmetryClass, mask: InlierMask
) -> Tuple[float, np.ndarray, PoseGradient, int]:
    """Minimum over candidate rotations of the mean inlier L1 coordinate error.

    Gradients flow through the winning candidate only; ties go to the lowest index.
    Returns (value, grad wrt coords_pred, grad wrt pose_gt, winning index).
    """
    _check_paired(coords_pred, observed, "sym_coordinate_loss")
    rows = _inlier_rows(mask)
    candidates = candidate_coordinates(observed, pose_gt, sym)
    values = [float(np.abs(coords_pred[rows] - c[rows]).sum(axis=1).mean()) for c in candidates]
    best = int(np.argmin(values))

    _, grad = _l1_mean_and_grad(coords_pred - candidates[best], rows)
    yaw = axis_rotation("y", 2.0 * np.pi * best / len(candidates)) if len(candidates) > 1 else np.eye(3)
    candidate_pose = Pose9(pose_gt.rotation @ yaw, pose_gt.translation, pose_gt.size)
    pose_grad = nocs_coordinate_vjp(observed, candidate_pose, -grad)
    pose_grad.rotation = pose_grad.rotation @ yaw.T
    return values[best], grad, pose_grad, best


def sym_coordinate_loss(coords_pred: np.ndarray, observed: np.ndarray, pose_gt: Pose9, sym: SymmetryClass, mask: InlierMask) -> float:
    return sym_coordinate_loss_and_grad(coords_pred, observed, pose_gt, sym, mask)[0]


def _unit_rows(diff: np.ndarray, dist: np.ndarray) -> np.ndarray:
    safe = np.where(dist > 0, dist, 1.0)
    return np.where((dist > 0)[:, None], diff / safe[:, None], 0.0)


def sym_shape_loss_and_grad(deformed: np.ndarray, mirrored: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Bidirectional Euclidean Chamfer distance and its gradients w.r.t. both clouds."""
    deformed = np.asarray(deformed, dtype=float).reshape(-1, 3)
    mirrored = np.asarray(mirrored, dtype=float).reshape(-1, 3)
    if len(deformed) == 0 or len(mirrored) == 0:
        raise EmptyCloudError("Chamfer distance needs two non-empty clouds")

    d_fwd, i_fwd = cKDTree(mirrored).query(deformed)
    d_bwd, i_bwd = cKDTree(deformed).query(mirrored)
    value = float(d_fwd.mean() + d_bwd.mean())

    u_fwd = _unit_rows(deformed - mirrored[i_fwd], d_fwd) / len(deformed)
    u_bwd = _unit_rows(mirrored - deformed[i_bwd], d_bwd) / len(mirrored)

    grad_deformed = u_fwd.copy()
    np.add.at(grad_deformed, i_bwd, -u_bwd)
    grad_mirrored = u_bwd.copy()
    np.add.at(grad_mirrored, i_fwd, -u_fwd)
    return value, grad_deformed, grad_mirrored


def sym_shape_loss(deformed: np.ndarray, mirrored: np.ndarray) -> float:
    return sym_shape_loss_and_grad(deformed, mirrored)[0]


def reconstruction_loss_and_grad(
    mirrored_pred: np.ndarray, observed: np.ndarray, pose_gt: Pose9, sym: SymmetryClass, mask: InlierMask
) -> Tuple[float, np.ndarray, PoseGradient]:
    _check_paired(mirrored_pred, observed, "reconstruction_loss")
    rows = _inlier_rows(mask)
    target = mirror_world(observed, pose_gt, sym)
    value, grad = _l1_mean_and_grad(target - mirrored_pred, rows)

    # target = A (p - t) + t with A = R F R^T
    R = pose_gt.rotation
    F = np.diag(sym.mirror_diagonal)
    A = R @ F @ R.T
    H = grad.T @ (observed - pose_gt.translation)
    summed = grad.sum(axis=0)
    pose_grad = PoseGradient((H + H.T) @ R @ F, summed - A @ summed, np.zeros(3))
    return value, -grad, pose_grad


def reconstruction_loss(mirrored_pred: np.ndarray, observed: np.ndarray, pose_gt: Pose9, sym: SymmetryClass, mask: InlierMask) -> float:
    return reconstruction_loss_and_grad(mirrored_pred, observed, pose_gt, sym, mask)[0]


def mask_loss(scores: np.ndarray, mask_gt: InlierMask) -> float:
    scores = np.asarray(scores, dtype=float).reshape(-1)
    _check_paired(scores, mask_gt.labels, "mask_loss")
    return float(np.abs(scores - mask_gt.labels.astype(float)).mean())


def mask_loss_raw_and_grad(mask_raw: np.ndarray, mask_gt: InlierMask) -> Tuple[float, np.ndarray]:
    """Mask loss on clamped raw scores, with the gradient w.r.t. the raw values."""
    _check_paired(mask_raw, mask_gt.labels, "mask_loss")
    scores = np.clip(mask_raw, 0.0, 1.0)
    diff = scores - mask_gt.labels.astype(float)
    inside = (mask_raw >= 0.0) & (mask_raw <= 1.0)
    return float(np.abs(diff).mean()), np.sign(diff) * inside / len(diff)


def combine_terms(terms: Dict[str, float], weights: LossWeights) -> float:
    return float(sum(weights.term_weight(name) * value for name, value in terms.items()))


@dataclass
class _Gradient:
    pose: PoseGradient
    deformation: np.ndarray
    logits: np.ndarray
    mirrored: np.ndarray
    mask_raw: np.ndarray

    @classmethod
    def zeros(cls, n_points: int, n_prior: int) -> "_Gradient":
        return cls(PoseGradient.zeros(), np.zeros((n_prior, 3)), np.zeros((n_points, n_prior)), np.zeros((n_points, 3)), np.zeros(n_points))

    def flatten(self, params: PoseParams) -> np.ndarray:
        pose = pose_params_vjp(params, self.pose).to_vector()
        return np.concatenate([pose, self.deformation.reshape(-1), self.logits.reshape(-1), self.mirrored.reshape(-1), self.mask_raw])


def _shape_target(observed_in: np.ndarray, mirrored_in: np.ndarray, reference: Pose9, sym: SymmetryClass, toggles: Toggles) -> np.ndarray:
    canonical = nocs_coordinate(observed_in, reference)
    if toggles.sym_recon:
        return np.concatenate([canonical, nocs_coordinate(mirrored_in, reference)])
    if toggles.sym_losses:
        return np.concatenate([canonical, mirror_point(canonical, sym)])
    return canonical


def total_loss(variables: Variables, problem: Problem, weights: LossWeights, with_gradient: bool = True) -> LossReport:
    """Weighted objective over the terms the problem's toggles enable.

    Inactive terms are reported as 0. In self-supervised mode the pose term is off and the
    reference-pose gradients of the coordinate, shape and reconstruction terms are added to
    the predicted pose.
    """
    toggles = problem.toggles
    profile = problem.profile
    sym = profile.symmetry
    observed = problem.observed
    n, m = len(observed), len(profile.prior)
    self_mode = problem.self_supervised

    pose = pose_from_params(variables.params, observed, profile.mean_size, problem.centroid)
    reference = pose if self_mode else problem.reference
    mask = problem.labels if toggles.outlier_removal else InlierMask.all_inliers(n)
    rows = _inlier_rows(mask)

    deformed = deform(profile.prior, variables.deformation) if toggles.prior else profile.prior
    matching = matching_from_logits(variables.logits) if toggles.prior else None
    coords = matching @ deformed if toggles.prior else None

    terms = {name: 0.0 for name in TERM_NAMES}
    term_grads: Dict[str, _Gradient] = {}

    def new_grad(name: str) -> _Gradient:
        term_grads[name] = _Gradient.zeros(n, m)
        return term_grads[name]

    def add_reference(g: _Gradient, pose_grad: PoseGradient) -> None:
        if self_mode:
            g.pose = g.pose + pose_grad

    def add_coords(g: _Gradient, grad_coords: np.ndarray) -> None:
        g.deformation += matching.T @ grad_coords
        g.logits += softmax_vjp(matching, grad_coords @ deformed.T)

    if toggles.direct and not self_mode:
        g = new_grad("pose")
        terms["pose"], g.pose = pose_loss_and_grad(pose, reference, sym)

    if toggles.prior:
        g = new_grad("sp_coordinate")
        coord_sym = sym if toggles.sym_losses else NO_SYMMETRY
        terms["sp_coordinate"], grad_coords, ref_grad, _ = sym_coordinate_loss_and_grad(coords, observed, reference, coord_sym, mask)
        add_coords(g, grad_coords)
        add_reference(g, ref_grad)

        g = new_grad("sp_deformation_reg")
        terms["sp_deformation_reg"], g.deformation = deformation_regularizer_and_grad(variables.deformation)
        g = new_grad("sp_matching_reg")
        terms["sp_matching_reg"], g.logits = matching_regularizer_logits_and_grad(variables.logits)

    if toggles.prior or self_mode:
        g = new_grad("sp_shape")
        observed_in, mirrored_in = observed[rows], variables.mirrored[rows]
        target = _shape_target(observed_in, mirrored_in, reference, sym, toggles)
        terms["sp_shape"], grad_deformed, grad_target = sym_shape_loss_and_grad(deformed, target)
        if toggles.prior:
            g.deformation += grad_deformed
        k = len(rows)
        grad_canonical = grad_target[:k].copy()
        if toggles.sym_recon:
            grad_mirror = grad_target[k:]
            g.mirrored[rows] = grad_mirror @ reference.rotation.T / reference.diagonal
            add_reference(g, nocs_coordinate_vjp(mirrored_in, reference, grad_mirror))
        elif toggles.sym_losses:
            grad_canonical += grad_target[k:] * sym.mirror_diagonal
        add_reference(g, nocs_coordinate_vjp(observed_in, reference, grad_canonical))

    if toggles.outlier_removal:
        g = new_grad("mask")
        terms["mask"], g.mask_raw = mask_loss_raw_and_grad(variables.mask_raw, problem.labels)

    if toggles.sym_recon:
        g = new_grad("reconstruction")
        terms["reconstruction"], g.mirrored, ref_grad = reconstruction_loss_and_grad(variables.mirrored, observed, reference, sym, mask)
        add_reference(g, ref_grad)

    if toggles.prior and (toggles.direct or self_mode):
        g = new_grad("consistency")
        terms["consistency"], grad_coords, g.pose = consistency_loss_and_grad(coords, observed, pose, mask)
        add_coords(g, grad_coords)

    active = tuple(name for name in TERM_NAMES if name in term_grads)
    total = combine_terms({name: terms[name] for name in active}, weights)
    report = LossReport(terms=terms, total=total, active=active, pose=pose, coords=coords)
    if with_gradient:
        report.term_gradients = {name: term_grads[name].flatten(variables.params) for name in active}
        gradient = np.zeros_like(variables.to_vector())
        for name in active:
            gradient += weights.term_weight(name) * report.term_gradients[name]
        report.gradient = gradient
    return report
