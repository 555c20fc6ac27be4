"""Evaluation protocol: symmetry-aware pose errors, oriented-box IoU and precision aggregation."""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.transform import Rotation as ScipyRotation

from .core.error_handling import ConfigurationError
from .geometry import Pose9, axis_rotation
from .symmetry import SymmetryClass, SymmetryKind, candidate_rotations

IOU_THRESHOLDS = (0.25, 0.5, 0.75)
# (name, degrees, meters)
POSE_BUCKETS = (
    ("5deg2cm", 5.0, 0.02),
    ("5deg5cm", 5.0, 0.05),
    ("10deg5cm", 10.0, 0.05),
    ("10deg10cm", 10.0, 0.10),
)
CURVE_THRESHOLDS = {
    "rotation": [float(x) for x in range(0, 61, 5)],
    "translation": [round(0.01 * x, 2) for x in range(0, 11)],
    "iou": [round(0.05 * x, 2) for x in range(0, 21)],
}
CLIP_EPSILON = 1e-12


@dataclass(frozen=True)
class PoseError:
    rotation_error: float
    translation_error: float
    iou3d: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class MetricsReport:
    overall: Dict[str, float]
    per_category: Dict[str, Dict[str, float]] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)
    curves: Dict[str, List[Tuple[float, float]]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "overall": self.overall,
            "per_category": self.per_category,
            "counts": self.counts,
            "curves": {kind: [list(point) for point in series] for kind, series in self.curves.items()},
        }


def _angle_between(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), float(a @ b))))


def _geodesic_deg(rotation_a: np.ndarray, rotation_b: np.ndarray) -> float:
    return float(np.degrees(ScipyRotation.from_matrix(rotation_a @ rotation_b.T).magnitude()))


def rotation_error(pred: np.ndarray, gt: np.ndarray, sym: SymmetryClass) -> float:
    """Degrees. Only the y axis counts for rotational symmetry; reflection also accepts the y-axis flip."""
    if sym.kind is SymmetryKind.ROTATIONAL_Y:
        return _angle_between(pred[:, 1], gt[:, 1])
    if sym.kind is SymmetryKind.REFLECTION_XY:
        return min(_geodesic_deg(pred, gt), _geodesic_deg(pred, gt @ axis_rotation("y", np.pi)))
    return _geodesic_deg(pred, gt)


def box_corners(pose: Pose9) -> np.ndarray:
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
    return (0.5 * signs * pose.size) @ pose.rotation.T + pose.translation


def _box_faces(half: np.ndarray) -> List[np.ndarray]:
    faces = []
    for axis in range(3):
        a, b = [k for k in range(3) if k != axis]
        for sign in (-1.0, 1.0):
            face = np.zeros((4, 3))
            face[:, axis] = sign * half[axis]
            face[:, a] = np.array([-1.0, 1.0, 1.0, -1.0]) * half[a]
            face[:, b] = np.array([-1.0, -1.0, 1.0, 1.0]) * half[b]
            faces.append(face)
    return faces


def _clip(polygon: List[np.ndarray], axis: int, sign: float, bound: float) -> List[np.ndarray]:
    """Sutherland-Hodgman step keeping the half-space sign * x[axis] <= bound."""
    result: List[np.ndarray] = []
    if not polygon:
        return result
    prev = polygon[-1]
    d_prev = sign * prev[axis] - bound
    for cur in polygon:
        d_cur = sign * cur[axis] - bound
        if d_cur <= CLIP_EPSILON:
            if d_prev > CLIP_EPSILON:
                result.append(prev + (d_prev / (d_prev - d_cur)) * (cur - prev))
            result.append(cur)
        elif d_prev <= CLIP_EPSILON:
            result.append(prev + (d_prev / (d_prev - d_cur)) * (cur - prev))
        prev, d_prev = cur, d_cur
    return result


def _clipped_faces(box_src: Pose9, box_template: Pose9) -> List[np.ndarray]:
    """Faces of `box_template` clipped to the inside of `box_src`, in world coordinates."""
    half_src = 0.5 * box_src.size
    # template faces expressed in the source box frame
    relative_rotation = box_src.rotation.T @ box_template.rotation
    relative_translation = box_src.rotation.T @ (box_template.translation - box_src.translation)
    points = []
    for face in _box_faces(0.5 * box_template.size):
        polygon = list(face @ relative_rotation.T + relative_translation)
        for axis in range(3):
            for sign in (1.0, -1.0):
                polygon = _clip(polygon, axis, sign, half_src[axis])
        points.extend(polygon)
    if not points:
        return []
    return list(np.asarray(points) @ box_src.rotation.T + box_src.translation)


def _canonical_order(a: Pose9, b: Pose9) -> Tuple[Pose9, Pose9]:
    key_a = tuple(np.concatenate([a.rotation.ravel(), a.translation, a.size]))
    key_b = tuple(np.concatenate([b.rotation.ravel(), b.translation, b.size]))
    return (a, b) if key_a <= key_b else (b, a)


def iou3d(box_a: Pose9, box_b: Pose9) -> float:
    """Exact oriented-box IoU: convex hull of the mutually clipped faces."""
    box_a, box_b = _canonical_order(box_a, box_b)
    if np.array_equal(box_a.rotation, box_b.rotation) and np.array_equal(box_a.translation, box_b.translation) and np.array_equal(box_a.size, box_b.size):
        return 1.0
    points = _clipped_faces(box_a, box_b) + _clipped_faces(box_b, box_a)
    if len(points) < 4:
        return 0.0
    try:
        intersection = ConvexHull(np.asarray(points)).volume
    except QhullError:
        # flat or touching contact
        return 0.0
    volume_a, volume_b = float(np.prod(box_a.size)), float(np.prod(box_b.size))
    union = volume_a + volume_b - intersection
    return float(np.clip(intersection / union, 0.0, 1.0))


def _inside(points: np.ndarray, box: Pose9) -> np.ndarray:
    local = (points - box.translation) @ box.rotation
    return np.all(np.abs(local) <= 0.5 * box.size, axis=1)


def _sample_box(rng: np.random.Generator, box: Pose9, samples: int) -> np.ndarray:
    local = (rng.random((samples, 3)) - 0.5) * box.size
    return local @ box.rotation.T + box.translation


def iou3d_monte_carlo(box_a: Pose9, box_b: Pose9, samples: int = 1_000_000, seed: int = 0) -> float:
    """Sampling estimate of iou3d: points drawn in each box are tested against the other."""
    rng = np.random.default_rng(seed)
    volume_a, volume_b = float(np.prod(box_a.size)), float(np.prod(box_b.size))
    frac_a = _inside(_sample_box(rng, box_a, samples), box_b).mean()
    frac_b = _inside(_sample_box(rng, box_b, samples), box_a).mean()
    intersection = 0.5 * (volume_a * frac_a + volume_b * frac_b)
    return float(intersection / (volume_a + volume_b - intersection))


def pose_error(pred: Pose9, gt: Pose9, sym: SymmetryClass) -> PoseError:
    """Rotation error in degrees, translation error in meters, IoU maximized over the symmetry candidates of gt."""
    ious = [iou3d(pred, Pose9(rotation, gt.translation, gt.size)) for rotation in candidate_rotations(gt.rotation, sym)]
    return PoseError(
        rotation_error=rotation_error(pred.rotation, gt.rotation, sym),
        translation_error=float(np.linalg.norm(pred.translation - gt.translation)),
        iou3d=max(ious),
    )


def _precisions(errors: Sequence[PoseError]) -> Dict[str, float]:
    rotation = np.array([e.rotation_error for e in errors])
    translation = np.array([e.translation_error for e in errors])
    iou = np.array([e.iou3d for e in errors])
    result = {f"iou{int(round(100 * t))}": float(np.mean(iou >= t)) for t in IOU_THRESHOLDS}
    for name, degrees, meters in POSE_BUCKETS:
        result[name] = float(np.mean((rotation < degrees) & (translation < meters)))
    result["median_rotation_deg"] = float(np.median(rotation))
    result["median_translation_m"] = float(np.median(translation))
    result["mean_iou"] = float(np.mean(iou))
    return result


def precision_curve(errors: Sequence[PoseError], kind: str, thresholds: Optional[Sequence[float]] = None) -> List[Tuple[float, float]]:
    if kind not in CURVE_THRESHOLDS:
        raise ConfigurationError(f"Unknown precision curve: {kind}", details={"key": "kind", "value": kind})
    if not errors:
        raise ConfigurationError("No pose errors to evaluate")
    thresholds = CURVE_THRESHOLDS[kind] if thresholds is None else thresholds
    if kind == "rotation":
        values = np.array([e.rotation_error for e in errors])
        return [(float(t), float(np.mean(values < t))) for t in thresholds]
    if kind == "translation":
        values = np.array([e.translation_error for e in errors])
        return [(float(t), float(np.mean(values < t))) for t in thresholds]
    values = np.array([e.iou3d for e in errors])
    return [(float(t), float(np.mean(values >= t))) for t in thresholds]


def aggregate(errors: Sequence[PoseError], categories: Optional[Sequence[str]] = None) -> MetricsReport:
    if not errors:
        raise ConfigurationError("No pose errors to aggregate")
    if categories is not None and len(categories) != len(errors):
        raise ConfigurationError("One category per pose error is required", details={"errors": len(errors), "categories": len(categories)})

    report = MetricsReport(overall=_precisions(errors), counts={"overall": len(errors)})
    report.curves = {kind: precision_curve(errors, kind) for kind in CURVE_THRESHOLDS}
    if categories is not None:
        for category in sorted(set(categories)):
            subset = [e for e, c in zip(errors, categories) if c == category]
            report.per_category[category] = _precisions(subset)
            report.counts[category] = len(subset)
    return report
