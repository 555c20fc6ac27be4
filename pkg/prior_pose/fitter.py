"""First-order fitting of pose, deformation, matching, mirrored points and mask scores for one instance."""

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import structlog
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .alignment import Alignment, AlignmentConfig, align_prior
from .core.error_handling import ConfigurationError, DegenerateInputError, DivergenceError, NonFiniteValueError, NonPositiveSizeError
from .geometry import Pose9, PoseParams, nocs_coordinate, params_from_pose, pose_from_params, random_small_rotation
from .objective import DEFAULT_INLIER_THRESHOLD, InlierMask, LossReport, LossWeights, Problem, Toggles, Variables, total_loss
from .prior import deform
from .similarity import RansacConfig, pose_from_nocs
from .symmetry import CategoryProfile, mirror_world
from .synthgen import Instance

logger = structlog.get_logger()

MIN_POINTS = 32
ARMIJO = 1e-4
MAX_BACKTRACKS = 30
DIVERGENCE_FACTOR = 10.0
# logit of the matched prior point under gt init; exp(-50) is below double resolution next to 1
GT_MATCH_LOGIT = 50.0
ALIGNED_SCHEMES = ("aligned", "multistart")

PRESETS: Dict[str, Toggles] = {
    "A1": Toggles(direct=True, prior=False, sym_losses=False, sym_recon=False, outlier_removal=False),
    "A2": Toggles(direct=False, prior=True, sym_losses=False, sym_recon=False, outlier_removal=False),
    "A3": Toggles(direct=True, prior=True, sym_losses=False, sym_recon=False, outlier_removal=False),
    "B1": Toggles(direct=False, prior=True, sym_losses=True, sym_recon=False, outlier_removal=False),
    "B2": Toggles(direct=True, prior=True, sym_losses=True, sym_recon=False, outlier_removal=False),
    "C": Toggles(direct=True, prior=True, sym_losses=True, sym_recon=True, outlier_removal=False),
    "D": Toggles(direct=True, prior=True, sym_losses=True, sym_recon=True, outlier_removal=True),
}

SUPERVISION_MODES = ("self", "oracle")


def resolve_preset(name: str) -> Toggles:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"Unknown preset: {name}", details={"key": "preset", "value": name, "known": sorted(PRESETS)})


def parse_init_scheme(scheme: str) -> Tuple[str, int]:
    """("perturbed", 1) for "perturbed", ("multistart", 8) for "multistart-8"."""
    if scheme in ("identity", "perturbed", "gt", "aligned"):
        return scheme, 1
    if scheme.startswith("multistart-"):
        count = scheme[len("multistart-") :]
        if count.isdigit() and int(count) >= 1:
            return "multistart", int(count)
    raise ConfigurationError(f"Unknown init scheme: {scheme}", details={"key": "init_scheme", "value": scheme})


@dataclass(frozen=True)
class FitConfig:
    max_steps: int = 2000
    step_size: float = 0.05
    weights: LossWeights = field(default_factory=LossWeights)
    toggles: Toggles = field(default_factory=Toggles)
    seed: int = 0
    init_scheme: str = "aligned"
    supervision: str = "self"
    monotone: bool = True
    tolerance: float = 1e-10
    # stop once `stall_window` steps gained less than stall_tolerance * |loss|; 0 disables
    stall_window: int = 100
    stall_tolerance: float = 1e-6
    relabel_every: int = 25
    inlier_threshold: float = DEFAULT_INLIER_THRESHOLD
    max_init_angle_deg: float = 20.0
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    ransac: RansacConfig = field(default_factory=lambda: RansacConfig(inlier_threshold=0.02))
    preset: Optional[str] = None

    def __post_init__(self):
        if self.max_steps < 0:
            raise ConfigurationError("max_steps must be non-negative", details={"key": "max_steps"})
        if not self.step_size > 0:
            raise ConfigurationError("step_size must be positive", details={"key": "step_size"})
        if self.supervision not in SUPERVISION_MODES:
            raise ConfigurationError(f"Unknown supervision mode: {self.supervision}", details={"key": "supervision"})
        if self.relabel_every < 1:
            raise ConfigurationError("relabel_every must be positive", details={"key": "relabel_every"})
        if self.stall_window < 0 or self.stall_tolerance < 0:
            raise ConfigurationError("stall_window and stall_tolerance must be non-negative", details={"key": "stall_window"})
        parse_init_scheme(self.init_scheme)

    @classmethod
    def from_preset(cls, name: str, **overrides: Any) -> "FitConfig":
        return cls(toggles=resolve_preset(name), preset=name, **overrides)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["weights"] = self.weights.to_dict()
        data["toggles"] = self.toggles.to_dict()
        data["ransac"] = self.ransac.to_dict()
        data["alignment"] = self.alignment.to_dict()
        return data


@dataclass
class FitResult:
    instance_id: str
    pose: Pose9
    trajectory: List[float]
    mask: InlierMask
    steps: int
    wall_time: float
    initial_loss: float
    final_loss: float
    mode: str
    start: int = 0
    terms: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        # wall_time stays out of artifacts
        return {
            "instance_id": self.instance_id,
            "pose": self.pose.to_dict(),
            "mode": self.mode,
            "steps": self.steps,
            "start": self.start,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "terms": self.terms,
            "inliers": self.mask.inlier_count,
        }


def alignments_for(instance: Instance, profile: CategoryProfile, scheme: str, cfg: Optional[AlignmentConfig] = None) -> List[Alignment]:
    """Ranked prior alignments with at least as many hypotheses as the scheme has starts."""
    _, count = parse_init_scheme(scheme)
    cfg = cfg or AlignmentConfig()
    return align_prior(instance.observed, profile, replace(cfg, yaw_steps=max(cfg.yaw_steps, count)))


def _gt_variables(instance: Instance, profile: CategoryProfile) -> Variables:
    """Pose at gt, prior snapped onto the gt coordinates, matching peaked on the nearest deformed point, mask at the gt labels."""
    observed = instance.observed
    pose = instance.pose_gt
    inlier_coords = instance.coords_gt[instance.inliers_gt.labels]
    _, nearest = cKDTree(inlier_coords).query(profile.prior)
    deformation = inlier_coords[nearest] - profile.prior

    _, matched = cKDTree(profile.prior + deformation).query(nocs_coordinate(observed, pose))
    logits = np.zeros((len(observed), len(profile.prior)))
    logits[np.arange(len(observed)), matched] = GT_MATCH_LOGIT
    return Variables(
        params=params_from_pose(pose, observed, profile.mean_size),
        deformation=deformation,
        logits=logits,
        mirrored=mirror_world(observed, pose, profile.symmetry),
        mask_raw=instance.inliers_gt.labels.astype(float),
    )


def _soft_matching_logits(coords: np.ndarray, deformed: np.ndarray) -> np.ndarray:
    """Gaussian affinities with the median nearest-neighbour spacing of the prior as bandwidth."""
    if len(deformed) < 2:
        return np.zeros((len(coords), len(deformed)))
    spacing, _ = cKDTree(deformed).query(deformed, k=2)
    bandwidth = max(float(np.median(spacing[:, 1])), 1e-6)
    return -cdist(coords, deformed, "sqeuclidean") / (2.0 * bandwidth**2)


def init_params(
    instance: Instance,
    profile: CategoryProfile,
    scheme: str,
    seed: int,
    start: int = 0,
    max_angle_deg: float = 20.0,
    alignments: Optional[List[Alignment]] = None,
) -> Variables:
    """Initial variables for one start.

    identity / perturbed: pose at the cloud centroid with the mean size, zero deformation,
    uniform matching and unit mask. aligned / multistart-N: the pose of the start-th best
    prior alignment, matching soft-assigned from that pose. gt: every variable at its
    ground-truth value.
    """
    kind, count = parse_init_scheme(scheme)
    if not 0 <= start < count:
        raise ConfigurationError(f"Start {start} out of range for {scheme}", details={"key": "init_scheme"})
    if kind == "gt":
        return _gt_variables(instance, profile)

    observed = instance.observed
    n, m = len(observed), len(profile.prior)
    logits = np.zeros((n, m))
    if kind in ALIGNED_SCHEMES:
        alignments = alignments or alignments_for(instance, profile, scheme)
        pose = alignments[start % len(alignments)].pose(profile.mean_size)
        params = params_from_pose(pose, observed, profile.mean_size)
        logits = _soft_matching_logits(nocs_coordinate(observed, pose), profile.prior)
    else:
        if kind == "identity":
            rotation = np.eye(3)
        else:
            rotation = random_small_rotation(np.random.default_rng(seed), np.deg2rad(max_angle_deg))
        params = PoseParams(rotation[:, 0], rotation[:, 1], np.zeros(3), np.zeros(3))
        pose = pose_from_params(params, observed, profile.mean_size)

    return Variables(
        params=params,
        deformation=np.zeros((m, 3)),
        logits=logits,
        mirrored=mirror_world(observed, pose, profile.symmetry),
        mask_raw=np.ones(n),
    )


def self_labels(variables: Variables, problem: Problem, pose: Pose9, threshold: float) -> InlierMask:
    """Outlier iff the observed point is farther than `threshold` (meters) from the deformed prior under `pose`."""
    profile = problem.profile
    deformed = deform(profile.prior, variables.deformation) if problem.toggles.prior else profile.prior
    distance, _ = cKDTree(deformed).query(nocs_coordinate(problem.observed, pose))
    labels = pose.diagonal * distance <= threshold
    if not labels.any():
        logger.warning("Relabeling found no inliers, keeping every point", points=len(labels))
        labels = np.ones_like(labels)
    return InlierMask(labels, np.clip(variables.mask_raw, 0.0, 1.0))


def _block_scales(n_points: int, n_prior: int) -> np.ndarray:
    slices = Variables.block_slices(n_points, n_prior)
    scales = np.ones(slices["mask_raw"].stop)
    scales[slices["deformation"]] = n_prior
    scales[slices["logits"]] = n_points
    scales[slices["mirrored"]] = n_points
    scales[slices["mask_raw"]] = n_points
    return scales


class _Descent:
    """Preconditioned gradient descent from one start."""

    def __init__(self, problem: Problem, cfg: FitConfig):
        self.problem = problem
        self.cfg = cfg

    def evaluate(self, vector: np.ndarray) -> Optional[LossReport]:
        n, m = len(self.problem.observed), len(self.problem.profile.prior)
        try:
            return total_loss(Variables.from_vector(vector, n, m), self.problem, self.cfg.weights)
        except (NonPositiveSizeError, NonFiniteValueError, DegenerateInputError):
            return None

    def relabel(self, x: np.ndarray, report: LossReport) -> Tuple[np.ndarray, LossReport]:
        """Swap in labels from the current fit, with the mask scores reset to them; kept only if the loss does not rise."""
        n, m = len(self.problem.observed), len(self.problem.profile.prior)
        labels = self_labels(Variables.from_vector(x, n, m), self.problem, report.pose, self.cfg.inlier_threshold).labels
        if np.array_equal(labels, self.problem.labels.labels):
            return x, report
        previous = self.problem
        self.problem = replace(previous, labels=InlierMask.from_labels(labels))
        relabeled = x.copy()
        relabeled[Variables.block_slices(n, m)["mask_raw"]] = labels.astype(float)
        candidate = self.evaluate(relabeled)
        if candidate is None or candidate.total > report.total:
            self.problem = previous
            logger.debug("Relabel rejected", inliers=int(labels.sum()), loss=report.total)
            return x, report
        logger.debug("Relabeled inliers", inliers=int(labels.sum()), loss=candidate.total)
        return relabeled, candidate

    def _stalled(self, trajectory: List[float]) -> bool:
        window = self.cfg.stall_window
        if window == 0 or len(trajectory) <= window:
            return False
        gained = trajectory[-window - 1] - trajectory[-1]
        return gained <= self.cfg.stall_tolerance * max(1.0, abs(trajectory[-1]))

    def run(self, variables: Variables) -> Tuple[np.ndarray, LossReport, List[float], float]:
        cfg = self.cfg
        x = variables.to_vector()
        scales = _block_scales(variables.n_points, variables.n_prior)
        report = self.evaluate(x)
        if report is None:
            raise DegenerateInputError("Initial variables do not describe a valid pose")
        initial = report.total
        trajectory: List[float] = []
        alpha = cfg.step_size
        relabeling = self.problem.self_supervised and cfg.toggles.outlier_removal

        for step in range(cfg.max_steps):
            if relabeling and step % cfg.relabel_every == 0:
                x, report = self.relabel(x, report)

            direction = -scales * report.gradient
            slope = float(report.gradient @ direction)
            if -slope <= cfg.tolerance:
                break

            if cfg.monotone:
                trial = min(2.0 * alpha, cfg.step_size)
                candidate = None
                for _ in range(MAX_BACKTRACKS):
                    candidate = self.evaluate(x + trial * direction)
                    if candidate is not None and candidate.total <= report.total + ARMIJO * trial * slope:
                        break
                    candidate = None
                    trial *= 0.5
                if candidate is None:
                    break
                alpha = trial
            else:
                candidate = self.evaluate(x + alpha * direction)
                if candidate is None or candidate.total > DIVERGENCE_FACTOR * max(initial, cfg.tolerance):
                    raise DivergenceError(
                        "Loss exceeded 10x its initial value",
                        details={"step": step, "initial": initial, "loss": None if candidate is None else candidate.total},
                    )
                trial = alpha

            decrease = report.total - candidate.total
            x = x + trial * direction
            report = candidate
            trajectory.append(report.total)
            if cfg.monotone and decrease <= cfg.tolerance * max(1.0, abs(report.total)):
                break
            if self._stalled(trajectory):
                logger.debug("Descent stalled", step=step, loss=report.total)
                break

        return x, report, trajectory, initial


def build_problem(instance: Instance, profile: CategoryProfile, cfg: FitConfig) -> Problem:
    if instance.n_points < MIN_POINTS:
        raise ConfigurationError(f"Instance needs at least {MIN_POINTS} points", details={"instance_id": instance.instance_id, "points": instance.n_points})
    if cfg.supervision == "oracle":
        return Problem(instance.observed, profile, instance.inliers_gt, cfg.toggles, reference=instance.pose_gt)
    return Problem(instance.observed, profile, InlierMask.all_inliers(instance.n_points), cfg.toggles)


def fit(instance: Instance, profile: CategoryProfile, cfg: FitConfig) -> FitResult:
    started = time.perf_counter()
    kind, count = parse_init_scheme(cfg.init_scheme)
    log = logger.bind(instance_id=instance.instance_id, preset=cfg.preset, supervision=cfg.supervision)
    build_problem(instance, profile, cfg)
    alignments = alignments_for(instance, profile, cfg.init_scheme, cfg.alignment) if kind in ALIGNED_SCHEMES else None

    best = None
    for start in range(count):
        problem = build_problem(instance, profile, cfg)
        descent = _Descent(problem, cfg)
        variables = init_params(instance, profile, cfg.init_scheme, cfg.seed, start, cfg.max_init_angle_deg, alignments)
        x, report, trajectory, initial = descent.run(variables)
        log.debug("Start finished", start=start, loss=report.total, steps=len(trajectory))
        if best is None or report.total < best[2].total:
            best = (start, x, report, trajectory, initial, descent.problem)

    start, x, report, trajectory, initial, problem = best
    variables = Variables.from_vector(x, instance.n_points, len(profile.prior))
    if cfg.toggles.outlier_removal:
        mask = InlierMask(problem.labels.labels, np.clip(variables.mask_raw, 0.0, 1.0))
    else:
        mask = InlierMask.all_inliers(instance.n_points)

    if cfg.toggles.direct:
        pose, mode = report.pose, "direct"
    else:
        rows = np.flatnonzero(mask.labels)
        pose, _ = pose_from_nocs(report.coords[rows], instance.observed[rows], cfg.ransac)
        mode = "two-stage"

    wall_time = time.perf_counter() - started
    log.info("Fit finished", mode=mode, start=start, steps=len(trajectory), loss=report.total, wall_time=round(wall_time, 3))
    return FitResult(
        instance_id=instance.instance_id,
        pose=pose,
        trajectory=trajectory,
        mask=mask,
        steps=len(trajectory),
        wall_time=wall_time,
        initial_loss=initial,
        final_loss=report.total,
        mode=mode,
        start=start,
        terms=dict(report.terms),
    )
