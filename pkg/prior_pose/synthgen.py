"""Synthetic category instances with exact ground truth.

Shapes are sampled from a (N, 3) array of uniforms so that two shapes of one category drawn
with the same uniforms have point-to-point correspondence; category priors are the mean of such
matched samples. Canonical clouds are metric, y-up and centered on their bounding box.
"""

from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import structlog

from .core.error_handling import ConfigurationError
from .geometry import Pose9, axis_rotation, random_rotation, random_small_rotation, world_location
from .objective import DEFAULT_INLIER_THRESHOLD, InlierMask, gt_inliers
from .symmetry import CategoryProfile, SymmetryClass, SymmetryKind

logger = structlog.get_logger()

DEFAULT_POINTS = 1024
DEFAULT_PRIOR_POINTS = 128
OUTLIER_MIN_OFFSET = 1.5
OUTLIER_MARGIN = 2.0
MAX_OUTLIER_ATTEMPTS = 1000

Params = Dict[str, float]
Generator = Callable[[Params, np.ndarray], Tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class ShapeSpec:
    name: str
    kind: str
    ranges: Dict[str, Tuple[float, float]]
    symmetry: SymmetryClass

    def __post_init__(self):
        if self.kind not in GENERATORS:
            raise ConfigurationError(f"Unknown generator kind: {self.kind}", details={"key": "kind", "value": self.kind})
        for key, (low, high) in self.ranges.items():
            if not (0 < low <= high):
                raise ConfigurationError(f"Invalid range for {key}: ({low}, {high})", details={"key": f"{self.name}.{key}"})

    def sample_params(self, rng: np.random.Generator) -> Params:
        return {key: float(rng.uniform(low, high)) for key, (low, high) in self.ranges.items()}

    def generate(self, params: Params, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Canonical metric cloud and its analytic bounding-box extents."""
        return GENERATORS[self.kind](params, u)


@dataclass
class Instance:
    instance_id: str
    category: str
    observed: np.ndarray
    coords_gt: np.ndarray
    pose_gt: Pose9
    inliers_gt: InlierMask
    seed: int

    @property
    def n_points(self) -> int:
        return len(self.observed)


@dataclass(frozen=True)
class PoseSamplerConfig:
    kind: str = "upright"
    translation_low: Tuple[float, float, float] = (-0.2, -0.2, 0.5)
    translation_high: Tuple[float, float, float] = (0.2, 0.2, 1.0)
    max_tilt_deg: float = 30.0

    def __post_init__(self):
        if self.kind not in POSE_SAMPLERS:
            raise ConfigurationError(f"Unknown pose sampler: {self.kind}", details={"key": "pose_sampler.kind", "value": self.kind})
        if any(lo > hi for lo, hi in zip(self.translation_low, self.translation_high)):
            raise ConfigurationError("translation_low must not exceed translation_high", details={"key": "pose_sampler.translation_low"})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _split(u0: np.ndarray, fractions: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Segment index of each u0 under cumulative `fractions`, and u0 rescaled to [0, 1) within it."""
    edges = np.concatenate([[0.0], np.cumsum(fractions)])
    edges[-1] = 1.0
    index = np.clip(np.searchsorted(edges, u0, side="right") - 1, 0, len(fractions) - 1)
    local = (u0 - edges[index]) / (edges[index + 1] - edges[index])
    return index, local


# faces as (axis, sign)
ALL_FACES = ((0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0), (2, -1.0))
OPEN_TOP_FACES = ((0, 1.0), (0, -1.0), (1, -1.0), (2, 1.0), (2, -1.0))


def _box_surface(local: np.ndarray, u1: np.ndarray, u2: np.ndarray, half: np.ndarray, faces: Sequence[Tuple[int, float]]) -> np.ndarray:
    face, _ = _split(local, [1.0 / len(faces)] * len(faces))
    points = np.zeros((len(local), 3))
    for i, (axis, sign) in enumerate(faces):
        rows = face == i
        a, b = [k for k in range(3) if k != axis]
        points[rows, axis] = sign * half[axis]
        points[rows, a] = (2.0 * u1[rows] - 1.0) * half[a]
        points[rows, b] = (2.0 * u2[rows] - 1.0) * half[b]
    return points


def _centered(points: np.ndarray, low: np.ndarray, high: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return points - 0.5 * (low + high), high - low


def cylinder(params: Params, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    r, h = params["radius"], params["height"]
    region, _ = _split(u[:, 0], [0.7, 0.15, 0.15])
    theta = 2.0 * np.pi * u[:, 1]
    rho = np.where(region == 0, r, r * np.sqrt(u[:, 2]))
    y = np.select([region == 0, region == 1], [(u[:, 2] - 0.5) * h, np.full(len(u), 0.5 * h)], -0.5 * h)
    points = np.column_stack([rho * np.cos(theta), y, rho * np.sin(theta)])
    return points, np.array([2.0 * r, h, 2.0 * r])


def bowl(params: Params, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Paraboloid shell: rim of the given radius at the top, apex at the bottom."""
    r, h = params["radius"], params["depth"]
    rho = r * np.sqrt(u[:, 1])
    theta = 2.0 * np.pi * u[:, 2]
    y = h * (rho / r) ** 2 - 0.5 * h
    points = np.column_stack([rho * np.cos(theta), y, rho * np.sin(theta)])
    return points, np.array([2.0 * r, h, 2.0 * r])


def open_box(params: Params, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Open-top box with a flat tab sticking out of the +x wall."""
    half = 0.5 * np.array([params["width"], params["height"], params["depth"]])
    tab = params["tab"]
    region, local = _split(u[:, 0], [0.8, 0.2])
    points = _box_surface(local, u[:, 1], u[:, 2], half, OPEN_TOP_FACES)
    rows = region == 1
    points[rows, 0] = half[0] + u[rows, 1] * tab
    points[rows, 1] = half[1] * 0.5
    points[rows, 2] = (u[rows, 2] - 0.5) * half[2]
    low = np.array([-half[0], -half[1], -half[2]])
    high = np.array([half[0] + tab, half[1], half[2]])
    return _centered(points, low, high)


def hinged_pair(params: Params, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Two plates sharing a hinge along z; mirror-symmetric across the xy plane."""
    base, screen, depth = params["base"], params["screen"], params["depth"]
    angle = np.deg2rad(params["angle"])
    region, _ = _split(u[:, 0], [0.5, 0.5])
    direction = np.array([-np.cos(angle), np.sin(angle)])
    along = np.where(region == 0, base * u[:, 1], screen * u[:, 1])
    points = np.column_stack(
        [
            np.where(region == 0, -along, along * direction[0]),
            np.where(region == 0, 0.0, along * direction[1]),
            (u[:, 2] - 0.5) * depth,
        ]
    )
    low = np.array([-base, 0.0, -0.5 * depth])
    high = np.array([max(0.0, screen * direction[0]), screen * direction[1], 0.5 * depth])
    return _centered(points, low, high)


def composite(params: Params, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Box body, an off-center lens cylinder on the +z face and a bump on top."""
    half = 0.5 * np.array([params["width"], params["height"], params["depth"]])
    lens_r, lens_l = params["lens_radius"], params["lens_length"]
    bump = params["bump"]
    region, local = _split(u[:, 0], [0.6, 0.25, 0.15])
    points = _box_surface(local, u[:, 1], u[:, 2], half, ALL_FACES)

    lens_x = half[0] - lens_r
    rows = region == 1
    theta = 2.0 * np.pi * u[rows, 1]
    points[rows, 0] = lens_x + lens_r * np.cos(theta)
    points[rows, 1] = lens_r * np.sin(theta)
    points[rows, 2] = half[2] + u[rows, 2] * lens_l

    rows = region == 2
    points[rows, 0] = -half[0] + u[rows, 1] * half[0]
    points[rows, 1] = half[1] + bump
    points[rows, 2] = (u[rows, 2] - 0.5) * half[2]

    low = -half
    high = np.array([half[0], half[1] + bump, half[2] + lens_l])
    return _centered(points, low, high)


GENERATORS: Dict[str, Generator] = {
    "cylinder": cylinder,
    "bowl_shell": bowl,
    "box": open_box,
    "box_pair_hinged": hinged_pair,
    "asymmetric_composite": composite,
}

SHAPES: Dict[str, ShapeSpec] = {
    "can": ShapeSpec("can", "cylinder", {"radius": (0.03, 0.05), "height": (0.10, 0.16)}, SymmetryClass(SymmetryKind.ROTATIONAL_Y)),
    "bowl": ShapeSpec("bowl", "bowl_shell", {"radius": (0.07, 0.10), "depth": (0.04, 0.07)}, SymmetryClass(SymmetryKind.ROTATIONAL_Y)),
    "box": ShapeSpec(
        "box", "box", {"width": (0.10, 0.16), "height": (0.06, 0.10), "depth": (0.08, 0.12), "tab": (0.03, 0.05)}, SymmetryClass(SymmetryKind.NONE)
    ),
    "laptop": ShapeSpec(
        "laptop",
        "box_pair_hinged",
        {"base": (0.22, 0.30), "screen": (0.18, 0.24), "depth": (0.20, 0.28), "angle": (100.0, 130.0)},
        SymmetryClass(SymmetryKind.REFLECTION_XY),
    ),
    "camera": ShapeSpec(
        "camera",
        "asymmetric_composite",
        {"width": (0.10, 0.14), "height": (0.06, 0.09), "depth": (0.04, 0.06), "lens_radius": (0.02, 0.03), "lens_length": (0.03, 0.06), "bump": (0.01, 0.02)},
        SymmetryClass(SymmetryKind.NONE),
    ),
}


def get_shape(name: str) -> ShapeSpec:
    try:
        return SHAPES[name]
    except KeyError:
        raise ConfigurationError(f"Unknown category: {name}", details={"key": "categories", "value": name})


def mean_shape(spec: ShapeSpec, param_sets: Sequence[Params], u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Average of matched clouds (same uniforms) and the mean of their extents."""
    clouds, extents = zip(*(spec.generate(params, u) for params in param_sets))
    return np.mean(clouds, axis=0), np.mean(extents, axis=0)


def make_prior(spec: ShapeSpec, population: int = 16, points: int = DEFAULT_PRIOR_POINTS, seed: int = 0) -> CategoryProfile:
    if population < 2:
        raise ConfigurationError("Prior population must be at least 2", details={"key": "prior_population", "value": population})
    if points < 1:
        raise ConfigurationError("Prior needs at least one point", details={"key": "prior_points", "value": points})
    rng = np.random.default_rng(seed)
    param_sets = [spec.sample_params(rng) for _ in range(population)]
    u = rng.random((points, 3))
    cloud, mean_size = mean_shape(spec, param_sets, u)
    return CategoryProfile(name=spec.name, symmetry=spec.symmetry, mean_size=mean_size, prior=cloud / np.linalg.norm(mean_size))


def _translation(rng: np.random.Generator, cfg: PoseSamplerConfig) -> np.ndarray:
    return rng.uniform(np.asarray(cfg.translation_low), np.asarray(cfg.translation_high))


def _uniform_pose(rng: np.random.Generator, cfg: PoseSamplerConfig) -> Tuple[np.ndarray, np.ndarray]:
    return random_rotation(rng), _translation(rng, cfg)


def _upright_pose(rng: np.random.Generator, cfg: PoseSamplerConfig) -> Tuple[np.ndarray, np.ndarray]:
    yaw = axis_rotation("y", rng.uniform(0.0, 2.0 * np.pi))
    tilt = random_small_rotation(rng, np.deg2rad(cfg.max_tilt_deg))
    return tilt @ yaw, _translation(rng, cfg)


def _identity_pose(rng: np.random.Generator, cfg: PoseSamplerConfig) -> Tuple[np.ndarray, np.ndarray]:
    return np.eye(3), _translation(rng, cfg)


POSE_SAMPLERS = {"uniform": _uniform_pose, "upright": _upright_pose, "identity": _identity_pose}


def _inject_outliers(rng: np.random.Generator, observed: np.ndarray, world_gt: np.ndarray, pose: Pose9, count: int, threshold: float) -> None:
    """Replace `count` points with uniform samples of the inflated oriented box, far from their gt location."""
    rows = rng.choice(len(observed), size=count, replace=False)
    extent = pose.size + 2.0 * OUTLIER_MARGIN * threshold
    for row in rows:
        for _ in range(MAX_OUTLIER_ATTEMPTS):
            local = (rng.random(3) - 0.5) * extent
            candidate = pose.rotation @ local + pose.translation
            if np.linalg.norm(candidate - world_gt[row]) > OUTLIER_MIN_OFFSET * threshold:
                observed[row] = candidate
                break
        else:
            direction = pose.rotation[:, 0]
            observed[row] = world_gt[row] + 2.0 * OUTLIER_MIN_OFFSET * threshold * direction


def make_instance(
    spec: ShapeSpec,
    noise_sigma: float = 0.0,
    outlier_fraction: float = 0.0,
    pose_sampler: Optional[PoseSamplerConfig] = None,
    seed: int = 0,
    n_points: int = DEFAULT_POINTS,
    instance_id: Optional[str] = None,
    threshold: float = DEFAULT_INLIER_THRESHOLD,
) -> Instance:
    if not 0.0 <= outlier_fraction < 1.0:
        raise ConfigurationError("outlier_fraction must be in [0, 1)", details={"key": "outlier_fraction", "value": outlier_fraction})
    if noise_sigma < 0:
        raise ConfigurationError("noise_sigma must be non-negative", details={"key": "noise_sigma", "value": noise_sigma})
    pose_sampler = pose_sampler or PoseSamplerConfig()
    rng = np.random.default_rng(seed)

    params = spec.sample_params(rng)
    canonical, extents = spec.generate(params, rng.random((n_points, 3)))
    rotation, translation = POSE_SAMPLERS[pose_sampler.kind](rng, pose_sampler)
    pose = Pose9(rotation, translation, extents)

    coords_gt = canonical / pose.diagonal
    world_gt = world_location(coords_gt, pose)
    observed = world_gt.copy()
    if noise_sigma > 0:
        observed += rng.normal(0.0, noise_sigma, size=observed.shape)

    count = int(round(outlier_fraction * n_points))
    if count:
        _inject_outliers(rng, observed, world_gt, pose, count, threshold)

    inliers = gt_inliers(observed, coords_gt, pose, threshold)
    instance_id = instance_id or f"{spec.name}-{seed}"
    logger.debug("Generated instance", instance_id=instance_id, outliers=count, points=n_points)
    return Instance(instance_id, spec.name, observed, coords_gt, pose, inliers, seed)
