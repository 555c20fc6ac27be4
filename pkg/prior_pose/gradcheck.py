"""Finite-difference verification of the analytic gradients of every loss term."""

from dataclasses import dataclass
from itertools import product
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from .core.error_handling import ConfigurationError
from .fitter import PRESETS
from .geometry import Pose9, PoseParams, params_from_pose, random_rotation, random_small_rotation, world_location
from .objective import TERM_NAMES, InlierMask, LossWeights, Problem, Toggles, Variables, total_loss
from .symmetry import NO_SYMMETRY, CategoryProfile, SymmetryClass, SymmetryKind

logger = structlog.get_logger()

FD_RELATIVE_STEP = 1e-6
PASS_THRESHOLD = 1e-4
FAULT_SCALE = 1.0 + 1e-2
CHECK_POINTS = 10
CHECK_PRIOR_POINTS = 6
MODES = ("oracle", "self")
_SYMMETRIES = (SymmetryClass(SymmetryKind.ROTATIONAL_Y, 6), SymmetryClass(SymmetryKind.REFLECTION_XY), NO_SYMMETRY)


@dataclass(frozen=True)
class TermCheck:
    term: str
    mode: str
    max_relative_error: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_relative_error < PASS_THRESHOLD

    def to_dict(self):
        return {"term": self.term, "mode": self.mode, "max_relative_error": self.max_relative_error, "trials": self.trials, "passed": self.passed}


def finite_difference(func: Callable[[np.ndarray], np.ndarray], x: np.ndarray, relative_step: float = FD_RELATIVE_STEP) -> np.ndarray:
    """Central differences with step relative_step * max(1, |x_j|).

    Scalar functions give an array shaped like x; vector functions of length k give (k, x.size).
    """
    x = np.asarray(x, dtype=float)
    columns = []
    for j in range(x.size):
        step = relative_step * max(1.0, abs(x[j]))
        plus, minus = x.copy(), x.copy()
        plus[j] += step
        minus[j] -= step
        columns.append((np.asarray(func(plus), dtype=float) - np.asarray(func(minus), dtype=float)) / (2.0 * step))
    return np.stack(columns, axis=-1)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def random_problem(rng: np.random.Generator, sym: SymmetryClass, mode: str, toggles: Optional[Toggles] = None) -> Tuple[Variables, Problem]:
    """A small instance under `toggles` (default: all on) with every variable away from kinks."""
    n, m = CHECK_POINTS, CHECK_PRIOR_POINTS
    profile = CategoryProfile("gradcheck", sym, rng.uniform(0.1, 0.3, 3), rng.uniform(-0.4, 0.4, (m, 3)))
    pose_gt = Pose9(random_rotation(rng), rng.uniform(-0.2, 0.2, 3) + np.array([0.0, 0.0, 0.7]), rng.uniform(0.1, 0.3, 3))
    observed = world_location(rng.uniform(-0.4, 0.4, (n, 3)), pose_gt) + rng.normal(0.0, 0.01, (n, 3))

    labels = rng.random(n) < 0.7
    labels[0] = True
    reference = pose_gt if mode == "oracle" else None
    problem = Problem(observed, profile, InlierMask.from_labels(labels), toggles or Toggles(), reference=reference)

    start = Pose9(random_small_rotation(rng, 0.3) @ pose_gt.rotation, pose_gt.translation + rng.normal(0.0, 0.02, 3), pose_gt.size * rng.uniform(0.9, 1.1, 3))
    params = params_from_pose(start, observed, profile.mean_size).to_vector() + rng.normal(0.0, 0.01, 12)
    variables = Variables(
        params=PoseParams.from_vector(params),
        deformation=rng.normal(0.0, 0.02, (m, 3)),
        logits=rng.normal(0.0, 1.0, (n, m)),
        mirrored=observed + rng.normal(0.0, 0.02, (n, 3)),
        mask_raw=rng.uniform(0.05, 0.95, n),
    )
    return variables, problem


def _term_values(vector: np.ndarray, problem: Problem, weights: LossWeights, n_prior: int) -> np.ndarray:
    variables = Variables.from_vector(vector, len(problem.observed), n_prior)
    report = total_loss(variables, problem, weights, with_gradient=False)
    return np.array([report.terms[name] for name in TERM_NAMES] + [report.total])


def check_gradients(seed: int = 0, trials: int = 3, fault: Optional[str] = None, toggle_sets: Optional[Sequence[Toggles]] = None) -> List[TermCheck]:
    """Max relative error per (term, mode) over `trials` random problems per toggle set, plus the weighted total.

    Toggle sets default to every fitter preset.

    `fault` names a term whose analytic gradient is deliberately scaled, for exercising the checker.
    """
    if trials < 1:
        raise ConfigurationError("trials must be at least 1", details={"key": "trials", "value": trials})
    if fault is not None and fault not in TERM_NAMES:
        raise ConfigurationError(f"Unknown loss term: {fault}", details={"key": "fault", "value": fault})

    toggle_sets = tuple(PRESETS.values()) if toggle_sets is None else tuple(toggle_sets)
    rng = np.random.default_rng(seed)
    weights = LossWeights()
    worst: Dict[Tuple[str, str], float] = {}
    for trial in range(trials):
        sym = _SYMMETRIES[trial % len(_SYMMETRIES)]
        for toggles, mode in product(toggle_sets, MODES):
            variables, problem = random_problem(rng, sym, mode, toggles)
            report = total_loss(variables, problem, weights)
            x = variables.to_vector()
            numeric = finite_difference(lambda v: _term_values(v, problem, weights, variables.n_prior), x)

            for name in report.active:
                analytic = report.term_gradients[name] * (FAULT_SCALE if name == fault else 1.0)
                error = relative_error(analytic, numeric[TERM_NAMES.index(name)])
                worst[(name, mode)] = max(worst.get((name, mode), 0.0), error)
            error = relative_error(report.gradient, numeric[-1])
            worst[("total", mode)] = max(worst.get(("total", mode), 0.0), error)
            logger.debug("Gradient trial", trial=trial, mode=mode, symmetry=sym.kind.value, toggles=toggles.to_dict())

    order = list(TERM_NAMES) + ["total"]
    checks = [TermCheck(term, mode, error, trials) for (term, mode), error in sorted(worst.items(), key=lambda kv: (MODES.index(kv[0][1]), order.index(kv[0][0])))]
    failed = [c for c in checks if not c.passed]
    logger.info("Gradient check finished", checks=len(checks), failed=len(failed), seed=seed, trials=trials)
    return checks
