"""Pose parameterizations, the NOCS map and the point-cloud primitives everything else consumes.

Points are numpy arrays: a single point has shape (3,), a cloud has shape (N, 3).
Angles are radians throughout.
"""

from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

from .core.error_handling import DegenerateInputError, EmptyCloudError, NonFiniteValueError, NonPositiveSizeError

MIN_COLUMN_NORM = 1e-6
MIN_COLUMN_ANGLE = 1e-4
ORTHONORMAL_TOLERANCE = 1e-9


def axis_rotation(axis: str, angle: float) -> np.ndarray:
    """Rotation matrix about a single canonical axis ("x", "y" or "z")."""
    return ScipyRotation.from_euler(axis, angle).as_matrix()


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform sample from the rotation group."""
    return ScipyRotation.random(random_state=rng).as_matrix()


def random_small_rotation(rng: np.random.Generator, max_angle: float) -> np.ndarray:
    """Rotation about a uniform random axis by an angle uniform in [0, max_angle]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return ScipyRotation.from_rotvec(axis * angle).as_matrix()


def is_rotation(matrix: np.ndarray, tol: float = ORTHONORMAL_TOLERANCE) -> bool:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape != (3, 3) or not np.all(np.isfinite(matrix)):
        return False
    return bool(np.allclose(matrix.T @ matrix, np.eye(3), atol=tol) and abs(np.linalg.det(matrix) - 1.0) <= tol)


@dataclass(frozen=True)
class Pose9:
    rotation: np.ndarray
    translation: np.ndarray
    size: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=float).reshape(3)
        size = np.asarray(self.size, dtype=float).reshape(3)
        for name, value in (("rotation", rotation), ("translation", translation), ("size", size)):
            if not np.all(np.isfinite(value)):
                raise NonFiniteValueError(f"Pose {name} is not finite", details={"component": name, "value": value.tolist()})
        if np.any(size <= 0):
            raise NonPositiveSizeError("Pose size must be positive on every axis", details={"size": size.tolist()})
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        object.__setattr__(self, "size", size)

    @property
    def diagonal(self) -> float:
        """Bounding-box diagonal L = sqrt(sx^2 + sy^2 + sz^2)."""
        return float(np.linalg.norm(self.size))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "size": self.size.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Pose9":
        return cls(
            rotation=np.asarray(data["rotation"], dtype=float).reshape(3, 3),
            translation=np.asarray(data["translation"], dtype=float),
            size=np.asarray(data["size"], dtype=float),
        )


@dataclass(frozen=True)
class PoseParams:
    """Raw pose head output: two unnormalized rotation columns plus residual translation and size."""

    rx_raw: np.ndarray
    ry_raw: np.ndarray
    t_residual: np.ndarray
    s_residual: np.ndarray

    def __post_init__(self):
        for name in ("rx_raw", "ry_raw", "t_residual", "s_residual"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.rx_raw, self.ry_raw, self.t_residual, self.s_residual])

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "PoseParams":
        vector = np.asarray(vector, dtype=float)
        return cls(vector[0:3], vector[3:6], vector[6:9], vector[9:12])

    @classmethod
    def zeros(cls) -> "PoseParams":
        return cls.from_vector(np.zeros(12))


@dataclass
class PoseGradient:
    """Gradient of a scalar with respect to a Pose9 (rotation matrix, translation, size)."""

    rotation: np.ndarray
    translation: np.ndarray
    size: np.ndarray

    @classmethod
    def zeros(cls) -> "PoseGradient":
        return cls(np.zeros((3, 3)), np.zeros(3), np.zeros(3))

    def __add__(self, other: "PoseGradient") -> "PoseGradient":
        return PoseGradient(self.rotation + other.rotation, self.translation + other.translation, self.size + other.size)

    def scaled(self, factor: float) -> "PoseGradient":
        return PoseGradient(self.rotation * factor, self.translation * factor, self.size * factor)


def _check_columns(rx: np.ndarray, ry: np.ndarray) -> None:
    nx, ny = np.linalg.norm(rx), np.linalg.norm(ry)
    if nx < MIN_COLUMN_NORM or ny < MIN_COLUMN_NORM:
        raise DegenerateInputError("Rotation column norm below 1e-6", details={"rx_norm": float(nx), "ry_norm": float(ny)})
    angle = np.arctan2(np.linalg.norm(np.cross(rx, ry)), float(rx @ ry))
    if angle < MIN_COLUMN_ANGLE or angle > np.pi - MIN_COLUMN_ANGLE:
        raise DegenerateInputError("Rotation columns are parallel", details={"angle": float(angle)})


def recover_rotation(params: PoseParams) -> np.ndarray:
    """Orthonormalize the two predicted columns, keeping r_y and fixing r_x against it."""
    rx, ry = params.rx_raw, params.ry_raw
    _check_columns(rx, ry)
    b2 = ry / np.linalg.norm(ry)
    a = rx - (b2 @ rx) * b2
    b1 = a / np.linalg.norm(a)
    b3 = np.cross(b1, b2)
    return np.column_stack([b1, b2, b3])


def recover_rotation_vjp(params: PoseParams, grad_rotation: np.ndarray):
    """Pull a gradient on the rotation matrix back onto (rx_raw, ry_raw)."""
    rx, ry = params.rx_raw, params.ry_raw
    _check_columns(rx, ry)
    ny = np.linalg.norm(ry)
    b2 = ry / ny
    a = rx - (b2 @ rx) * b2
    na = np.linalg.norm(a)
    b1 = a / na

    g1 = grad_rotation[:, 0] + np.cross(b2, grad_rotation[:, 2])
    g2 = grad_rotation[:, 1] + np.cross(grad_rotation[:, 2], b1)

    ga = (g1 - (g1 @ b1) * b1) / na
    g_rx = ga - (ga @ b2) * b2
    g2 = g2 - (b2 @ rx) * ga - (ga @ b2) * rx
    g_ry = (g2 - (g2 @ b2) * b2) / ny
    return g_rx, g_ry


def centroid(cloud: np.ndarray) -> np.ndarray:
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(cloud) == 0:
        raise EmptyCloudError("Point cloud is empty")
    return cloud.mean(axis=0)


def recover_translation(t_residual: np.ndarray, cloud: np.ndarray) -> np.ndarray:
    return np.asarray(t_residual, dtype=float) + centroid(cloud)


def recover_size(s_residual: np.ndarray, mean_size: np.ndarray) -> np.ndarray:
    size = np.asarray(s_residual, dtype=float) + np.asarray(mean_size, dtype=float)
    if np.any(size <= 0):
        raise NonPositiveSizeError("Recovered size is not positive", details={"size": size.tolist()})
    return size


def pose_from_params(params: PoseParams, cloud: np.ndarray, mean_size: np.ndarray, cloud_centroid: Optional[np.ndarray] = None) -> Pose9:
    translation = params.t_residual + (centroid(cloud) if cloud_centroid is None else cloud_centroid)
    return Pose9(recover_rotation(params), translation, recover_size(params.s_residual, mean_size))


def params_from_pose(pose: Pose9, cloud: np.ndarray, mean_size: np.ndarray) -> PoseParams:
    """Inverse of pose_from_params: residuals relative to the cloud centroid and the mean size."""
    return PoseParams(
        rx_raw=pose.rotation[:, 0],
        ry_raw=pose.rotation[:, 1],
        t_residual=pose.translation - centroid(cloud),
        s_residual=pose.size - np.asarray(mean_size, dtype=float),
    )


def pose_params_vjp(params: PoseParams, grad: PoseGradient) -> PoseParams:
    """Chain a Pose9 gradient through recover_rotation/translation/size; returned as a PoseParams of gradients."""
    g_rx, g_ry = recover_rotation_vjp(params, grad.rotation)
    return PoseParams(g_rx, g_ry, grad.translation, grad.size)


def nocs_coordinate(p: np.ndarray, pose: Pose9) -> np.ndarray:
    """c = R^T (p - t) / L for a point or a cloud."""
    return ((np.asarray(p, dtype=float) - pose.translation) @ pose.rotation) / pose.diagonal


def world_location(c: np.ndarray, pose: Pose9) -> np.ndarray:
    """p = R (L c) + t, the inverse of nocs_coordinate."""
    return (pose.diagonal * np.asarray(c, dtype=float)) @ pose.rotation.T + pose.translation


def nocs_coordinate_vjp(points: np.ndarray, pose: Pose9, grad_coords: np.ndarray) -> PoseGradient:
    """Gradient w.r.t. the pose of sum(grad_coords * nocs_coordinate(points, pose))."""
    length = pose.diagonal
    offsets = points - pose.translation
    coords = (offsets @ pose.rotation) / length
    grad_rotation = offsets.T @ grad_coords / length
    grad_translation = -(pose.rotation @ grad_coords.sum(axis=0)) / length
    grad_length = -float(np.sum(grad_coords * coords)) / length
    return PoseGradient(grad_rotation, grad_translation, grad_length * pose.size / length)
