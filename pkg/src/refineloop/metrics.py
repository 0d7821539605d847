"""Framework-level refinement metrics: NPG, NAUI, SIC and ESR.

Every function is direction aware: under ``minimize`` a lower task metric is
an improvement. Failed iterations are represented as ``None`` in the value
trajectory; they count as attempts but never as improvements.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

from .errors import EmptyTrajectory


class Direction(str, Enum):
    MAXIMIZE = "maximize"
    MINIMIZE = "minimize"


@dataclass(frozen=True)
class Objective:
    metric_name: str
    direction: Direction = Direction.MAXIMIZE

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))

    def gain(self, value: float, reference: float) -> float:
        """Signed improvement of ``value`` over ``reference``."""
        if self.direction is Direction.MAXIMIZE:
            return value - reference
        return reference - value

    def better(self, value: float, reference: float) -> bool:
        return self.gain(value, reference) > 0

    def to_dict(self) -> dict:
        return {"metric_name": self.metric_name, "direction": self.direction.value}

    @classmethod
    def from_dict(cls, data: dict) -> "Objective":
        return cls(data["metric_name"], Direction(data.get("direction", "maximize")))


@dataclass(frozen=True)
class MetricTrajectory:
    baseline: float
    values: tuple[Optional[float], ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))

    @property
    def attempts(self) -> int:
        return len(self.values)

    @property
    def successes(self) -> int:
        return sum(v is not None for v in self.values)


@dataclass(frozen=True)
class FrameworkMetrics:
    npg: float
    naui: float
    sic: int
    esr: float

    def to_dict(self) -> dict:
        return {"npg": self.npg, "naui": self.naui, "sic": self.sic, "esr": self.esr}


def _check(traj: MetricTrajectory) -> None:
    if traj.attempts < 1:
        raise EmptyTrajectory("trajectory has no attempts")


def npg(traj: MetricTrajectory, obj: Objective) -> float:
    """Net gain of the best value over the baseline (0 when nothing beats it)."""
    _check(traj)
    best = 0.0
    for v in traj.values:
        if v is not None:
            best = max(best, obj.gain(v, traj.baseline))
    return best


def naui(traj: MetricTrajectory, obj: Objective) -> float:
    _check(traj)
    total = 0.0
    for v in traj.values:
        if v is not None:
            total += max(0.0, obj.gain(v, traj.baseline))
    return total / traj.attempts


def sic(traj: MetricTrajectory, obj: Objective) -> int:
    """Count iterations that set a strict new peak, the baseline being the first peak."""
    _check(traj)
    peak = traj.baseline
    count = 0
    for v in traj.values:
        if v is not None and obj.better(v, peak):
            peak = v
            count += 1
    return count


def esr(traj: MetricTrajectory) -> float:
    _check(traj)
    return traj.successes / traj.attempts


def framework_metrics(traj: MetricTrajectory, obj: Objective) -> FrameworkMetrics:
    return FrameworkMetrics(npg(traj, obj), naui(traj, obj), sic(traj, obj), esr(traj))


def trajectory_from_values(baseline: float, values: Sequence[Optional[float]]) -> MetricTrajectory:
    return MetricTrajectory(float(baseline), tuple(None if v is None else float(v) for v in values))
