from concurrent.futures import ProcessPoolExecutor, as_completed
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
import typer
from dotenv import load_dotenv
from rich.console import Console
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

from .bundle import Bundle, read_bundle, read_json, write_bundle, write_report
from .config import ExperimentConfig, load_config
from .core.error_handling import EXIT_NUMERICAL, BaseError, ErrorResponse, GradientCheckError, IdentifierMismatchError, handle_errors
from .core.logging import setup_logging
from .core.monitoring import Metrics, MetricsConfig
from .fitter import FitConfig, fit
from .geometry import Pose9
from .gradcheck import check_gradients
from .metrics import PoseError, aggregate, pose_error
from .similarity import RansacConfig, pose_from_nocs
from .symmetry import CategoryProfile
from .synthgen import Instance, make_instance, make_prior

load_dotenv()
setup_logging()
logger = structlog.get_logger()

app = typer.Typer(help="Category-level 9DoF pose fitting with shape priors and symmetry-aware losses")
console = Console()

# a failed fit counts as a miss at every threshold
FAILED_POSE_ERROR = PoseError(rotation_error=180.0, translation_error=float("inf"), iou3d=0.0)


class OnError(str, Enum):
    fail = "fail"
    skip = "skip"


class Application:
    def __init__(self):
        self.metrics = Metrics(MetricsConfig.from_env())

    def fail(self, error: Exception) -> typer.Exit:
        """Log, count and print an error; return the Exit carrying its code."""
        if isinstance(error, BaseError):
            logger.error("Command failed", error_type=error.__class__.__name__, message=error.message, details=error.details)
            code = error.exit_code
        else:
            logger.error("Unexpected error", error_type=error.__class__.__name__, message=str(error))
            code = EXIT_NUMERICAL
        self.metrics.track_error(error.__class__.__name__)
        console.print(f"❌ {error}")
        return typer.Exit(code)


def _fit_instance(instance: Instance, profile: CategoryProfile, cfg: FitConfig) -> Tuple[Dict[str, Any], float]:
    result = fit(instance, profile, cfg)
    error = pose_error(result.pose, instance.pose_gt, profile.symmetry)
    row = {"category": instance.category, "status": "ok", **result.to_dict(), **error.to_dict()}
    return row, result.wall_time


@handle_errors
def _fit_instance_safe(instance: Instance, profile: CategoryProfile, cfg: FitConfig) -> Tuple[Dict[str, Any], float]:
    return _fit_instance(instance, profile, cfg)


def _solve_instance(instance: Instance, profile: CategoryProfile, cfg: RansacConfig) -> Tuple[Dict[str, Any], float]:
    pose, inliers = pose_from_nocs(instance.coords_gt, instance.observed, cfg)
    error = pose_error(pose, instance.pose_gt, profile.symmetry)
    row = {"instance_id": instance.instance_id, "category": instance.category, "status": "ok", "pose": pose.to_dict(), "inliers": int(inliers.sum()), **error.to_dict()}
    return row, 0.0


@handle_errors
def _solve_instance_safe(instance: Instance, profile: CategoryProfile, cfg: RansacConfig) -> Tuple[Dict[str, Any], float]:
    return _solve_instance(instance, profile, cfg)


def _failed_row(instance: Instance, response: ErrorResponse) -> Dict[str, Any]:
    return {"instance_id": instance.instance_id, "category": instance.category, "status": "failed", **response.to_dict()}


def _run_all(
    bundle: Bundle,
    worker: Callable[..., Any],
    settings: Any,
    jobs: int,
    progress: Progress,
    task: Any,
) -> List[Tuple[Any, Instance]]:
    """Run `worker` over every instance; outcomes come back in bundle order whatever the job count."""
    tasks = [(instance, bundle.profiles[instance.category], settings) for instance in bundle.instances]
    outcomes: List[Any] = [None] * len(tasks)
    if jobs == 1:
        for index, args in enumerate(tasks):
            outcomes[index] = worker(*args)
            progress.advance(task)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            futures = {executor.submit(worker, *args): index for index, args in enumerate(tasks)}
            for future in as_completed(futures):
                outcomes[futures[future]] = future.result()
                progress.advance(task)
    return list(zip(outcomes, bundle.instances))


def _collect(outcomes: Sequence[Tuple[Any, Instance]], application: Application, preset: Optional[str]) -> List[Dict[str, Any]]:
    rows = []
    for outcome, instance in outcomes:
        if isinstance(outcome, ErrorResponse):
            rows.append(_failed_row(instance, outcome))
            application.metrics.track_error(outcome.error_type)
            if preset is not None:
                application.metrics.track_fit(preset, "failed", 0.0)
            continue
        row, wall_time = outcome
        rows.append(row)
        if preset is not None:
            application.metrics.track_fit(preset, "ok", wall_time)
        else:
            application.metrics.track_solve("ok")
    return rows


def _summary(rows: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    ok = [r for r in rows if r["status"] == "ok"]
    summary: Dict[str, Any] = {"instances": len(rows), "succeeded": len(ok), "failed": len(rows) - len(ok)}
    if ok:
        summary["median_rotation_deg"] = float(np.median([r["rotation_error"] for r in ok]))
        summary["median_translation_m"] = float(np.median([r["translation_error"] for r in ok]))
        summary["mean_iou"] = float(np.mean([r["iou3d"] for r in ok]))
    return summary


def _print_summary(summary: Dict[str, Any]) -> None:
    console.print(f"✅ {summary['succeeded']}/{summary['instances']} instances succeeded")
    if "median_rotation_deg" in summary:
        console.print(
            f"📐 median rotation error {summary['median_rotation_deg']:.2f}°, "
            f"median translation error {100 * summary['median_translation_m']:.2f} cm, mean IoU {summary['mean_iou']:.3f}"
        )


def _csv_rows(rows: Sequence[Dict[str, Any]]) -> List[Dict[str, Any]]:
    return [{k: v for k, v in row.items() if not isinstance(v, dict)} for row in rows]


def _resolve_config(bundle: Bundle, config: Optional[Path], seed: Optional[int], preset: Optional[str], jobs: Optional[int]) -> ExperimentConfig:
    base = load_config(config) if config is not None else ExperimentConfig.from_dict(bundle.config)
    return base.with_overrides(seed=seed, preset=preset, jobs=jobs)


@app.command()
def gen(
    out: Path = typer.Option(..., help="Bundle directory to create"),
    config: Optional[Path] = typer.Option(None, help="Experiment config (JSON)"),
    seed: Optional[int] = typer.Option(None, help="Override the config seed"),
):
    """Generate a synthetic dataset bundle: category priors plus posed, noisy instances."""
    application = Application()
    try:
        cfg = load_config(config).with_overrides(seed=seed)
        with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console) as progress:
            task = progress.add_task("Building category priors...", total=None)
            profiles = {name: make_prior(cfg.shape(name), cfg.prior_population, cfg.prior_points, seed=cfg.prior_seed(k)) for k, name in enumerate(cfg.categories)}

            progress.update(task, description="Sampling instances...")
            instances = []
            for index in range(cfg.count):
                name = cfg.categories[index % len(cfg.categories)]
                instances.append(
                    make_instance(
                        cfg.shape(name),
                        noise_sigma=cfg.noise_sigma,
                        outlier_fraction=cfg.outlier_fraction,
                        pose_sampler=cfg.pose_sampler,
                        seed=cfg.instance_seed(index),
                        n_points=cfg.points,
                        instance_id=f"{name}-{index:04d}",
                        threshold=cfg.inlier_threshold,
                    )
                )

            progress.update(task, description="Writing bundle...")
            write_bundle(out, cfg.to_dict(), profiles, instances)
    except Exception as e:
        raise application.fail(e)

    console.print(f"✅ Generated {len(instances)} instances across {len(profiles)} categories")
    console.print(f"📁 Bundle saved to {out}")


@app.command("fit")
def fit_command(
    bundle: Path = typer.Option(..., help="Bundle directory produced by gen"),
    out: Path = typer.Option(..., help="Directory for results.json and results.csv"),
    config: Optional[Path] = typer.Option(None, help="Experiment config; defaults to the one stored in the bundle"),
    preset: Optional[str] = typer.Option(None, help="Loss-toggle preset (A1, A2, A3, B1, B2, C, D)"),
    seed: Optional[int] = typer.Option(None, help="Override the config seed"),
    jobs: Optional[int] = typer.Option(None, help="Worker processes; results do not depend on it"),
    on_error: OnError = typer.Option(OnError.fail, help="Abort on the first failure or record it and continue"),
):
    """Fit every instance of a bundle by gradient descent on the joint objective."""
    application = Application()
    try:
        data = read_bundle(bundle)
        cfg = _resolve_config(data, config, seed, preset, jobs)
        fit_cfg = cfg.fit_config()
        worker = _fit_instance_safe if on_error is OnError.skip else _fit_instance
        logger.info("Fitting bundle", bundle=str(bundle), instances=len(data.instances), preset=cfg.preset, jobs=cfg.jobs, **application.metrics.get_system_metrics())

        with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console) as progress:
            task = progress.add_task(f"Fitting {len(data.instances)} instances ({cfg.preset})...", total=len(data.instances))
            rows = _collect(_run_all(data, worker, fit_cfg, cfg.jobs, progress, task), application, cfg.preset)

        summary = _summary(rows)
        payload = {"config": cfg.to_dict(), "fit": fit_cfg.to_dict(), "seed": cfg.seed, "per_instance": rows, "summary": summary}
        write_report(out, "results", payload, _csv_rows(rows))
    except Exception as e:
        raise application.fail(e)

    _print_summary(summary)
    console.print(f"📁 Results saved to {out}")


@app.command()
def solve(
    bundle: Path = typer.Option(..., help="Bundle directory produced by gen"),
    out: Path = typer.Option(..., help="Directory for results.json and results.csv"),
    config: Optional[Path] = typer.Option(None, help="Experiment config; defaults to the one stored in the bundle"),
    seed: Optional[int] = typer.Option(None, help="Override the config seed"),
    jobs: Optional[int] = typer.Option(None, help="Worker processes; results do not depend on it"),
    on_error: OnError = typer.Option(OnError.fail, help="Abort on the first failure or record it and continue"),
):
    """Recover poses from the stored NOCS coordinates with Umeyama + RANSAC."""
    application = Application()
    try:
        data = read_bundle(bundle)
        cfg = _resolve_config(data, config, seed, None, jobs)
        worker = _solve_instance_safe if on_error is OnError.skip else _solve_instance

        with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console) as progress:
            task = progress.add_task(f"Solving {len(data.instances)} instances...", total=len(data.instances))
            rows = _collect(_run_all(data, worker, cfg.solve_ransac, cfg.jobs, progress, task), application, None)

        summary = _summary(rows)
        payload = {"config": cfg.to_dict(), "ransac": cfg.solve_ransac.to_dict(), "seed": cfg.seed, "per_instance": rows, "summary": summary}
        write_report(out, "results", payload, _csv_rows(rows))
    except Exception as e:
        raise application.fail(e)

    _print_summary(summary)
    console.print(f"📁 Results saved to {out}")


def _match_results(data: Bundle, per_instance: Sequence[Dict[str, Any]]) -> List[PoseError]:
    by_id = {row["instance_id"]: row for row in per_instance}
    expected = [instance.instance_id for instance in data.instances]
    missing = sorted(set(expected) - set(by_id))
    extra = sorted(set(by_id) - set(expected))
    if missing or extra:
        raise IdentifierMismatchError("Results do not match the bundle instances", details={"missing": missing, "extra": extra})

    errors = []
    for instance in data.instances:
        row = by_id[instance.instance_id]
        if row.get("status") != "ok":
            errors.append(FAILED_POSE_ERROR)
            continue
        profile = data.profiles[instance.category]
        errors.append(pose_error(Pose9.from_dict(row["pose"]), instance.pose_gt, profile.symmetry))
    return errors


@app.command("eval")
def eval_command(
    bundle: Path = typer.Option(..., help="Bundle directory produced by gen"),
    results: Path = typer.Option(..., help="results.json written by fit or solve"),
    out: Path = typer.Option(..., help="Directory for report.json and report.csv"),
):
    """Score results against the bundle's ground truth."""
    application = Application()
    try:
        data = read_bundle(bundle)
        stored = read_json(results)
        with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console) as progress:
            task = progress.add_task("Scoring poses...", total=None)
            errors = _match_results(data, stored.get("per_instance", []))
            categories = [instance.category for instance in data.instances]
            report = aggregate(errors, categories)
            progress.update(task, description="Writing report...")

        rows = [{"instance_id": i.instance_id, "category": i.category, **e.to_dict()} for i, e in zip(data.instances, errors)]
        payload = {
            "bundle_config": data.config,
            "results_config": stored.get("config"),
            "seed": data.config.get("seed"),
            "metrics": report.to_dict(),
            "per_instance": rows,
        }
        write_report(out, "report", payload, rows)
    except Exception as e:
        raise application.fail(e)

    overall = report.overall
    console.print(
        f"✅ IoU25 {overall['iou25']:.3f}  IoU50 {overall['iou50']:.3f}  IoU75 {overall['iou75']:.3f}  "
        f"5°2cm {overall['5deg2cm']:.3f}  5°5cm {overall['5deg5cm']:.3f}  10°5cm {overall['10deg5cm']:.3f}  10°10cm {overall['10deg10cm']:.3f}"
    )
    console.print(f"📁 Report saved to {out}")


@app.command()
def gradcheck(
    seed: int = typer.Option(0, help="Seed for the random test problems"),
    trials: int = typer.Option(3, help="Random problems per supervision mode"),
    out: Optional[Path] = typer.Option(None, help="Directory for gradcheck.json and gradcheck.csv"),
    fault: Optional[str] = typer.Option(None, hidden=True),
):
    """Compare analytic loss gradients against central finite differences."""
    application = Application()
    try:
        with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console) as progress:
            progress.add_task("Checking gradients...", total=None)
            checks = check_gradients(seed=seed, trials=trials, fault=fault)

        table = Table(title="Gradient check")
        for column in ("term", "mode", "max relative error", "status"):
            table.add_column(column)
        for check in checks:
            table.add_row(check.term, check.mode, f"{check.max_relative_error:.2e}", "✅" if check.passed else "❌")
        console.print(table)

        rows = [check.to_dict() for check in checks]
        if out is not None:
            write_report(out, "gradcheck", {"seed": seed, "trials": trials, "checks": rows}, rows)
        failed = [f"{c.term}/{c.mode}" for c in checks if not c.passed]
        if failed:
            raise GradientCheckError(f"Gradient check failed for {', '.join(failed)}", details={"failed": failed})
    except Exception as e:
        raise application.fail(e)

    console.print(f"✅ All {len(checks)} gradient checks passed")


if __name__ == "__main__":
    app()
