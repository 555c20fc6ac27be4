"""Coarse similarity alignment of a category prior onto an observed cloud.

Upright rotation hypotheses (a yaw grid about the canonical y axis) are each refined by
trimmed point-to-point ICP with a free scale, and ranked by a capped Chamfer score in NOCS units.
"""

from dataclasses import asdict, dataclass
from typing import Any, Dict, List

import numpy as np
import structlog
from scipy.spatial import cKDTree

from .core.error_handling import ConfigurationError, DegenerateConfigurationError, EmptyCloudError
from .geometry import Pose9, axis_rotation
from .similarity import SimilarityTransform, umeyama
from .symmetry import CategoryProfile

logger = structlog.get_logger()


@dataclass(frozen=True)
class AlignmentConfig:
    yaw_steps: int = 12
    iterations: int = 30
    # correspondences farther than trim * median distance are dropped
    trim: float = 2.5
    # NOCS units
    score_cap: float = 0.1

    def __post_init__(self):
        if self.yaw_steps < 1:
            raise ConfigurationError("yaw_steps must be positive", details={"key": "alignment.yaw_steps"})
        if self.iterations < 0:
            raise ConfigurationError("iterations must be non-negative", details={"key": "alignment.iterations"})
        if not self.trim > 1.0:
            raise ConfigurationError("trim must exceed 1", details={"key": "alignment.trim"})
        if not self.score_cap > 0:
            raise ConfigurationError("score_cap must be positive", details={"key": "alignment.score_cap"})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class Alignment:
    hypothesis: int
    transform: SimilarityTransform
    score: float

    def pose(self, mean_size: np.ndarray) -> Pose9:
        """Pose whose diagonal is the fitted scale; the per-axis size keeps the mean-size aspect."""
        mean_size = np.asarray(mean_size, dtype=float)
        return Pose9(self.transform.rotation, self.transform.translation, mean_size * self.transform.scale / np.linalg.norm(mean_size))


def upright_hypotheses(count: int) -> List[np.ndarray]:
    return [axis_rotation("y", 2.0 * np.pi * k / count) for k in range(count)]


def _initial_transform(prior: np.ndarray, observed: np.ndarray, rotation: np.ndarray) -> SimilarityTransform:
    center_prior = np.median(prior, axis=0)
    center_observed = np.median(observed, axis=0)
    spread_prior = np.median(np.linalg.norm(prior - center_prior, axis=1))
    spread_observed = np.median(np.linalg.norm(observed - center_observed, axis=1))
    scale = float(spread_observed / spread_prior) if spread_prior > 0 else 1.0
    return SimilarityTransform(scale, rotation, center_observed - scale * rotation @ center_prior)


def _kept(distance: np.ndarray, trim: float) -> np.ndarray:
    cutoff = trim * float(np.median(distance))
    return distance <= cutoff if cutoff > 0 else np.ones(len(distance), dtype=bool)


def refine(prior: np.ndarray, observed: np.ndarray, observed_tree: cKDTree, transform: SimilarityTransform, cfg: AlignmentConfig) -> SimilarityTransform:
    """Trimmed ICP matching in both directions, re-solved with Umeyama each iteration."""
    for _ in range(cfg.iterations):
        moved = transform.apply(prior)
        d_forward, i_forward = observed_tree.query(moved)
        d_backward, i_backward = cKDTree(moved).query(observed)
        forward = _kept(d_forward, cfg.trim)
        backward = _kept(d_backward, cfg.trim)
        source = np.concatenate([prior[forward], prior[i_backward[backward]]])
        target = np.concatenate([observed[i_forward[forward]], observed[backward]])
        try:
            transform = umeyama(source, target)
        except DegenerateConfigurationError:
            break
    return transform


def alignment_score(prior: np.ndarray, observed: np.ndarray, observed_tree: cKDTree, transform: SimilarityTransform, cap: float) -> float:
    """Mean prior-to-cloud distance plus capped mean cloud-to-prior distance, both divided by the scale."""
    moved = transform.apply(prior)
    d_forward, _ = observed_tree.query(moved)
    d_backward, _ = cKDTree(moved).query(observed)
    scale = transform.scale
    return float(d_forward.mean() / scale + np.minimum(d_backward / scale, cap).mean())


def align_prior(observed: np.ndarray, profile: CategoryProfile, cfg: AlignmentConfig) -> List[Alignment]:
    """Every refined hypothesis, best score first; ties keep hypothesis order."""
    observed = np.asarray(observed, dtype=float).reshape(-1, 3)
    if len(observed) == 0:
        raise EmptyCloudError("Cannot align a prior to an empty cloud")
    prior = profile.prior
    tree = cKDTree(observed)

    alignments = []
    for index, rotation in enumerate(upright_hypotheses(cfg.yaw_steps)):
        transform = refine(prior, observed, tree, _initial_transform(prior, observed, rotation), cfg)
        if not transform.scale > 0:
            continue
        alignments.append(Alignment(index, transform, alignment_score(prior, observed, tree, transform, cfg.score_cap)))
    if not alignments:
        raise DegenerateConfigurationError("No alignment hypothesis produced a positive scale", details={"category": profile.name})

    alignments.sort(key=lambda a: a.score)
    logger.debug("Aligned prior", category=profile.name, best_score=alignments[0].score, hypothesis=alignments[0].hypothesis)
    return alignments
