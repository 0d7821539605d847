"""Closed-loop, literature-guided model refinement engine."""

from .metrics import Direction, FrameworkMetrics, MetricTrajectory, Objective
from .orchestrator import RunConfig, generate_report, run

__all__ = [
    "Direction",
    "FrameworkMetrics",
    "MetricTrajectory",
    "Objective",
    "RunConfig",
    "generate_report",
    "run",
]

__version__ = "0.1.0"
