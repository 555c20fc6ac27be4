import os
from dataclasses import dataclass
from typing import Dict

import psutil
from prometheus_client import CollectorRegistry, Counter, Histogram, start_http_server


@dataclass
class MetricsConfig:
    enabled: bool = False
    port: int = 8000

    @classmethod
    def from_env(cls) -> "MetricsConfig":
        return cls(
            enabled=os.getenv("PRIOR_POSE_METRICS_ENABLED", "false").lower() == "true",
            port=int(os.getenv("PRIOR_POSE_METRICS_PORT", "8000")),
        )


class Metrics:
    def __init__(self, config: MetricsConfig):
        self.config = config
        self.registry = CollectorRegistry()
        if config.enabled:
            start_http_server(config.port, registry=self.registry)

        self.fit_count = Counter(
            "pose_fits_total",
            "Total number of pose fits",
            ["preset", "status"],
            registry=self.registry,
        )

        self.fit_duration = Histogram(
            "pose_fit_duration_seconds",
            "Wall time of a single pose fit",
            ["preset"],
            registry=self.registry,
        )

        self.solver_calls = Counter(
            "similarity_solver_calls_total",
            "Umeyama/RANSAC pose recoveries",
            ["status"],
            registry=self.registry,
        )

        self.error_count = Counter("error_total", "Total number of errors", ["type"], registry=self.registry)

    def track_fit(self, preset: str, status: str, duration: float) -> None:
        """Track one finished fit."""
        if self.config.enabled:
            self.fit_count.labels(preset=preset, status=status).inc()
            self.fit_duration.labels(preset=preset).observe(duration)

    def track_solve(self, status: str) -> None:
        if self.config.enabled:
            self.solver_calls.labels(status=status).inc()

    def track_error(self, error_type: str) -> None:
        """Track an error."""
        if self.config.enabled:
            self.error_count.labels(type=error_type).inc()

    def get_system_metrics(self) -> Dict[str, float]:
        """Get system metrics."""
        return {
            "cpu_percent": psutil.cpu_percent(),
            "memory_percent": psutil.virtual_memory().percent,
        }
