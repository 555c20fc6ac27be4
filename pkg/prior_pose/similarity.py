"""Closed-form similarity alignment (Umeyama) and its RANSAC wrapper: the two-stage pose baseline."""

from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
import structlog

from .core.error_handling import CardinalityMismatchError, ConfigurationError, DegenerateConfigurationError, NoConsensusError
from .geometry import Pose9

logger = structlog.get_logger()

RANK_TOLERANCE = 1e-9


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=float) @ self.rotation.T) + self.translation

    def residuals(self, source: np.ndarray, target: np.ndarray) -> np.ndarray:
        return np.linalg.norm(self.apply(source) - target, axis=1)


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 200
    inlier_threshold: float = 0.01
    min_sample_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be positive", details={"key": "ransac.max_iterations"})
        if not self.inlier_threshold > 0:
            raise ConfigurationError("inlier_threshold must be positive", details={"key": "ransac.inlier_threshold"})
        if self.min_sample_size < 3:
            raise ConfigurationError("min_sample_size must be at least 3", details={"key": "ransac.min_sample_size"})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _paired(source: np.ndarray, target: np.ndarray, minimum: int) -> Tuple[np.ndarray, np.ndarray]:
    source = np.asarray(source, dtype=float).reshape(-1, 3)
    target = np.asarray(target, dtype=float).reshape(-1, 3)
    if len(source) != len(target):
        raise CardinalityMismatchError("Source and target clouds differ in size", details={"source": len(source), "target": len(target)})
    if len(source) < minimum:
        raise DegenerateConfigurationError(f"At least {minimum} correspondences are required", details={"count": len(source)})
    return source, target


def umeyama(source: np.ndarray, target: np.ndarray) -> SimilarityTransform:
    """Least-squares (scale, R, t) with scale * R @ source + t ~ target; reflections are disallowed."""
    source, target = _paired(source, target, 3)

    mu_source = source.mean(axis=0)
    mu_target = target.mean(axis=0)
    d_source = source - mu_source
    d_target = target - mu_target

    spread = np.linalg.svd(d_source, compute_uv=False)
    if spread[0] <= 0 or spread[1] <= RANK_TOLERANCE * spread[0]:
        raise DegenerateConfigurationError("Source points are collinear or coincident", details={"singular_values": spread.tolist()})

    sigma = d_target.T @ d_source / len(source)
    U, d, V_t = np.linalg.svd(sigma)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(V_t) < 0:
        S[2, 2] = -1.0

    rotation = U @ S @ V_t
    scale = float((d * S.diagonal()).sum() / d_source.var(axis=0).sum())
    translation = mu_target - scale * rotation @ mu_source
    return SimilarityTransform(scale, rotation, translation)


def umeyama_ransac(source: np.ndarray, target: np.ndarray, cfg: RansacConfig) -> Tuple[SimilarityTransform, np.ndarray]:
    """Best hypothesis by inlier count (ties: lower inlier residual sum), refit on its inliers."""
    source, target = _paired(source, target, cfg.min_sample_size)
    rng = np.random.default_rng(cfg.seed)
    n = len(source)

    best_count = 0
    best_residual = np.inf
    best_mask: Optional[np.ndarray] = None
    for _ in range(cfg.max_iterations):
        sample = rng.choice(n, size=cfg.min_sample_size, replace=False)
        try:
            hypothesis = umeyama(source[sample], target[sample])
        except DegenerateConfigurationError:
            continue
        residuals = hypothesis.residuals(source, target)
        mask = residuals <= cfg.inlier_threshold
        count = int(mask.sum())
        residual = float(residuals[mask].sum())
        if count > best_count or (count == best_count and count > 0 and residual < best_residual):
            best_count, best_residual, best_mask = count, residual, mask

    if best_mask is None or best_count < cfg.min_sample_size:
        raise NoConsensusError("RANSAC found no consensus set", details={"best_inliers": best_count, "required": cfg.min_sample_size})

    transform = umeyama(source[best_mask], target[best_mask])
    logger.debug("RANSAC consensus", inliers=best_count, points=n)
    return transform, best_mask


def pose_from_nocs(coords: np.ndarray, observed: np.ndarray, cfg: RansacConfig) -> Tuple[Pose9, np.ndarray]:
    """Recover a Pose9 from paired NOCS coordinates and observations.

    The similarity scale is the bounding-box diagonal; size is that scale times the per-axis
    NOCS extent 2 * max |c| of the consensus coordinates. That extent assumes the object is
    centered on its bounding box and that the coordinates reach both faces of every axis; a
    partial view that misses a face underestimates the size along that axis. Rotation and
    translation do not depend on it.
    """
    transform, mask = umeyama_ransac(coords, observed, cfg)
    extents = 2.0 * np.abs(np.asarray(coords, dtype=float)[mask]).max(axis=0)
    pose = Pose9(transform.rotation, transform.translation, transform.scale * extents)
    return pose, mask
