from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List

import numpy as np

from .core.error_handling import ConfigurationError, EmptyCloudError, NonPositiveSizeError
from .geometry import Pose9, axis_rotation

DEFAULT_CANDIDATE_COUNT = 36


class SymmetryKind(str, Enum):
    NONE = "none"
    ROTATIONAL_Y = "rotational_y"
    REFLECTION_XY = "reflection_xy"


# F_mir as a diagonal sign flip in the canonical frame
_MIRROR_DIAGONALS = {
    SymmetryKind.NONE: np.array([1.0, 1.0, 1.0]),
    SymmetryKind.ROTATIONAL_Y: np.array([-1.0, 1.0, -1.0]),
    SymmetryKind.REFLECTION_XY: np.array([1.0, 1.0, -1.0]),
}


@dataclass(frozen=True)
class SymmetryClass:
    kind: SymmetryKind = SymmetryKind.NONE
    candidate_count: int = DEFAULT_CANDIDATE_COUNT

    def __post_init__(self):
        object.__setattr__(self, "kind", SymmetryKind(self.kind))
        if self.candidate_count < 1:
            raise ConfigurationError("candidate_count must be >= 1", details={"candidate_count": self.candidate_count})
        if self.kind is not SymmetryKind.ROTATIONAL_Y:
            object.__setattr__(self, "candidate_count", 1)

    @property
    def is_symmetric(self) -> bool:
        return self.kind is not SymmetryKind.NONE

    @property
    def mirror_diagonal(self) -> np.ndarray:
        return _MIRROR_DIAGONALS[self.kind].copy()

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind.value, "candidate_count": self.candidate_count}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SymmetryClass":
        try:
            kind = SymmetryKind(data.get("kind", "none"))
        except ValueError:
            raise ConfigurationError(f"Unknown symmetry kind: {data.get('kind')}", details={"key": "symmetry.kind"})
        return cls(kind=kind, candidate_count=int(data.get("candidate_count", DEFAULT_CANDIDATE_COUNT)))


NO_SYMMETRY = SymmetryClass(SymmetryKind.NONE)


@dataclass(frozen=True)
class CategoryProfile:
    name: str
    symmetry: SymmetryClass
    mean_size: np.ndarray
    prior: np.ndarray = field(repr=False)

    def __post_init__(self):
        mean_size = np.asarray(self.mean_size, dtype=float).reshape(3)
        prior = np.asarray(self.prior, dtype=float).reshape(-1, 3)
        if len(prior) == 0:
            raise EmptyCloudError(f"Category {self.name} has an empty prior")
        if np.any(mean_size <= 0):
            raise NonPositiveSizeError(f"Category {self.name} has a non-positive mean size", details={"mean_size": mean_size.tolist()})
        object.__setattr__(self, "mean_size", mean_size)
        object.__setattr__(self, "prior", prior)


def mirror_point(p: np.ndarray, sym: SymmetryClass) -> np.ndarray:
    """Mirror canonical-frame points: (-x, y, -z) about the y axis, (x, y, -z) across the xy plane."""
    return np.asarray(p, dtype=float) * _MIRROR_DIAGONALS[sym.kind]


def mirror_world(p: np.ndarray, pose: Pose9, sym: SymmetryClass) -> np.ndarray:
    """R F_mir(R^T (p - t)) + t for a point or a cloud."""
    canonical = (np.asarray(p, dtype=float) - pose.translation) @ pose.rotation
    return mirror_point(canonical, sym) @ pose.rotation.T + pose.translation


def candidate_rotations(rotation_gt: np.ndarray, sym: SymmetryClass) -> List[np.ndarray]:
    if sym.kind is not SymmetryKind.ROTATIONAL_Y:
        return [np.asarray(rotation_gt, dtype=float)]
    n = sym.candidate_count
    return [rotation_gt @ axis_rotation("y", 2.0 * np.pi * k / n) for k in range(n)]


# symmetry classes of real-world categories the synthetic ones stand in for
CATEGORY_SYMMETRY = {
    "bottle": SymmetryKind.ROTATIONAL_Y,
    "can": SymmetryKind.ROTATIONAL_Y,
    "bowl": SymmetryKind.ROTATIONAL_Y,
    "laptop": SymmetryKind.REFLECTION_XY,
    "camera": SymmetryKind.NONE,
    "mug": SymmetryKind.NONE,
    "box": SymmetryKind.NONE,
}
