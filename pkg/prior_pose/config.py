import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from .alignment import AlignmentConfig
from .core.error_handling import BundleIOError, ConfigurationError
from .fitter import FitConfig, parse_init_scheme, resolve_preset
from .objective import DEFAULT_INLIER_THRESHOLD, LossWeights
from .similarity import RansacConfig
from .symmetry import DEFAULT_CANDIDATE_COUNT, SymmetryClass
from .synthgen import SHAPES, PoseSamplerConfig, ShapeSpec, get_shape

JOBS_ENV = "PRIOR_POSE_JOBS"


def _default_jobs() -> int:
    return int(os.getenv(JOBS_ENV, "1"))


@dataclass
class ExperimentConfig:
    categories: List[str] = field(default_factory=lambda: list(SHAPES))
    count: int = 10
    points: int = 1024
    prior_points: int = 128
    prior_population: int = 16
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    candidate_count: int = DEFAULT_CANDIDATE_COUNT
    pose_sampler: PoseSamplerConfig = field(default_factory=PoseSamplerConfig)
    preset: str = "D"
    supervision: str = "self"
    init_scheme: str = "multistart-8"
    max_steps: int = 2000
    step_size: float = 0.05
    inlier_threshold: float = DEFAULT_INLIER_THRESHOLD
    weights: LossWeights = field(default_factory=LossWeights)
    fit_ransac: RansacConfig = field(default_factory=lambda: RansacConfig(inlier_threshold=0.02))
    solve_ransac: RansacConfig = field(default_factory=lambda: RansacConfig(inlier_threshold=0.02))
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    seed: int = 0
    jobs: int = field(default_factory=_default_jobs)

    def __post_init__(self):
        if self.count < 1:
            raise ConfigurationError("count must be at least 1", details={"key": "count", "value": self.count})
        if not self.categories:
            raise ConfigurationError("at least one category is required", details={"key": "categories"})
        for name in self.categories:
            get_shape(name)
        if self.jobs < 1:
            raise ConfigurationError("jobs must be at least 1", details={"key": "jobs", "value": self.jobs})
        resolve_preset(self.preset)
        parse_init_scheme(self.init_scheme)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"Unknown config key: {unknown[0]}", details={"key": unknown[0]})
        values = dict(data)
        try:
            if "weights" in values:
                values["weights"] = LossWeights.from_dict(values["weights"])
            if "pose_sampler" in values:
                sampler = dict(values["pose_sampler"])
                for key in ("translation_low", "translation_high"):
                    if key in sampler:
                        sampler[key] = tuple(float(v) for v in sampler[key])
                values["pose_sampler"] = PoseSamplerConfig(**sampler)
            for key in ("fit_ransac", "solve_ransac"):
                if key in values:
                    values[key] = RansacConfig(**values[key])
            if "alignment" in values:
                values["alignment"] = AlignmentConfig(**values["alignment"])
            config = cls(**values)
            # fit settings are only read at fit time; build them now so bad values fail here
            config.fit_config()
            return config
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"Invalid config value: {e}", details={"error": str(e)})

    def with_overrides(self, seed: Optional[int] = None, preset: Optional[str] = None, jobs: Optional[int] = None) -> "ExperimentConfig":
        updates = {k: v for k, v in {"seed": seed, "preset": preset, "jobs": jobs}.items() if v is not None}
        return replace(self, **updates)

    def shape(self, name: str) -> ShapeSpec:
        spec = get_shape(name)
        return replace(spec, symmetry=SymmetryClass(spec.symmetry.kind, self.candidate_count))

    def fit_config(self) -> FitConfig:
        return FitConfig.from_preset(
            self.preset,
            max_steps=self.max_steps,
            step_size=self.step_size,
            weights=self.weights,
            seed=self.seed,
            init_scheme=self.init_scheme,
            supervision=self.supervision,
            inlier_threshold=self.inlier_threshold,
            ransac=self.fit_ransac,
            alignment=self.alignment,
        )

    def instance_seed(self, index: int) -> int:
        return int(np.random.SeedSequence([self.seed, 0, index]).generate_state(1)[0])

    def prior_seed(self, category_index: int) -> int:
        return int(np.random.SeedSequence([self.seed, 1, category_index]).generate_state(1)[0])

    def to_dict(self) -> Dict[str, Any]:
        # jobs changes scheduling only, never results
        data = asdict(self)
        data.pop("jobs")
        return data


def load_config(path: Optional[Path] = None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise BundleIOError(f"Config file not found: {path}", details={"path": str(path)})
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Config file is not valid JSON: {e.msg}", details={"path": str(path)})
    if not isinstance(data, dict):
        raise ConfigurationError("Config file must hold a JSON object", details={"path": str(path)})
    return ExperimentConfig.from_dict(data)
