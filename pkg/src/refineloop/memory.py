"""Evolving memory: append-only iteration log, usage counters, batch rewards and anchors.

A paper's batch reward at batch ``b`` aggregates every iteration ``k <= batch_size * b``::

    R = sum(successes - failures) / (sum(attempts) + 1)

so it stays strictly inside (-1, 1). Iteration ``i`` sees the rewards of
batch ``(i - 1) // batch_size``; iterations 1..batch_size therefore see zero.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Optional

from .errors import DuplicateIteration, NonContiguousIteration, SnapshotMissing, StoreCorruption
from .execution import ExecutionOutcome
from .metrics import MetricTrajectory, Objective
from .selection import ReferenceSet
from .snapshots import CodebaseSnapshot, SnapshotStore

logger = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 10
LESSON_WINDOW = 5


class RewardMode(str, Enum):
    EMPIRICAL = "empirical"
    ZERO = "zero"  # reward feedback removed
    CONSTANT_ONE = "constant_one"  # every used paper gets reward 1


@dataclass
class IterationRecord:
    iteration: int
    reference_set: ReferenceSet
    approach_summary: str
    outcome: ExecutionOutcome
    blueprint_digest: str = ""
    transcript_ref: str = ""
    improved: bool = False
    lesson: str = ""
    objective_value: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "refs": self.reference_set.to_dict(),
            "approach": self.approach_summary,
            "metrics": dict(sorted(self.outcome.metrics.items())),
            "status": self.outcome.status.value,
            "improved": self.improved,
            "lesson": self.lesson,
            "blueprint_digest": self.blueprint_digest,
            "transcript_ref": self.transcript_ref,
            "outcome": self.outcome.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "IterationRecord":
        outcome = ExecutionOutcome.from_dict(data["outcome"])
        return cls(int(data["iteration"]), ReferenceSet.from_dict(data["refs"]), data.get("approach", ""),
                   outcome, data.get("blueprint_digest", ""), data.get("transcript_ref", ""),
                   bool(data.get("improved", False)), data.get("lesson", ""))


@dataclass(frozen=True)
class UsageCount:
    successes: int
    failures: int

    @property
    def attempts(self) -> int:
        return self.successes + self.failures


@dataclass(frozen=True)
class RewardLedger:
    batch: int
    rewards: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "rewards", MappingProxyType(dict(self.rewards)))

    def get(self, paper_id: str) -> float:
        return self.rewards.get(paper_id, 0.0)


def batch_index(iteration: int, batch_size: int = DEFAULT_BATCH_SIZE) -> int:
    return (iteration - 1) // batch_size


class MemoryStore:
    """Single-writer store; with ``log_path`` every record is appended as one JSON line.

    The first log line is a header holding the objective, baseline metrics,
    baseline snapshot id and batch size.
    """

    def __init__(
        self,
        objective: Objective,
        baseline_metrics: Mapping[str, float],
        baseline_snapshot_id: str,
        batch_size: int = DEFAULT_BATCH_SIZE,
        log_path: Optional[Path] = None,
        snapshots: Optional[SnapshotStore] = None,
        _write_header: bool = True,
    ):
        if objective.metric_name not in baseline_metrics:
            raise ValueError(f"baseline metrics lack the objective {objective.metric_name!r}")
        self.objective = objective
        self.baseline_metrics = dict(baseline_metrics)
        self.baseline_snapshot_id = baseline_snapshot_id
        self.batch_size = batch_size
        self.log_path = Path(log_path) if log_path is not None else None
        self.snapshots = snapshots
        self.records: list[IterationRecord] = []
        self.counters: dict[tuple[str, int], UsageCount] = {}
        self._ledger_cache: dict[tuple[int, RewardMode], RewardLedger] = {}
        if self.log_path is not None and _write_header:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self.log_path.write_text(json.dumps(self.header(), sort_keys=True) + "\n", encoding="utf-8")

    def header(self) -> dict:
        return {"kind": "header", "objective": self.objective.to_dict(),
                "baseline_metrics": dict(sorted(self.baseline_metrics.items())),
                "baseline_snapshot": self.baseline_snapshot_id, "batch_size": self.batch_size}

    @property
    def baseline_value(self) -> float:
        return float(self.baseline_metrics[self.objective.metric_name])

    @property
    def last_iteration(self) -> int:
        return self.records[-1].iteration if self.records else 0

    def value_of(self, iteration: int) -> Optional[float]:
        if iteration == 0:
            return self.baseline_value
        rec = self.records[iteration - 1]
        return rec.objective_value

    def _objective_value(self, outcome: ExecutionOutcome) -> Optional[float]:
        if not outcome.succeeded:
            return None
        return float(outcome.metrics[self.objective.metric_name])

    # anchors -------------------------------------------------------------

    def _ranked(self) -> list[int]:
        """Baseline and successful iterations, best first; ties keep the earlier iteration."""
        cands = [(0, self.baseline_value)]
        cands += [(r.iteration, r.objective_value) for r in self.records if r.objective_value is not None]
        sign = 1.0 if self.objective.direction.value == "maximize" else -1.0
        cands.sort(key=lambda c: (-sign * c[1], c[0]))
        return [it for it, _ in cands]

    def anchors(self) -> tuple[int, int]:
        ranked = self._ranked()
        return ranked[0], (ranked[1] if len(ranked) > 1 else ranked[0])

    def foundation_snapshot_id(self) -> str:
        best, _ = self.anchors()
        return self.snapshot_id_of(best)

    def snapshot_id_of(self, iteration: int) -> str:
        if iteration == 0:
            return self.baseline_snapshot_id
        sid = self.records[iteration - 1].outcome.snapshot_id
        if not sid:
            raise SnapshotMissing(f"iteration {iteration} has no snapshot")
        return sid

    def foundation_snapshot(self) -> CodebaseSnapshot:
        if self.snapshots is None:
            raise SnapshotMissing("store has no snapshot directory attached")
        return self.snapshots.get(self.foundation_snapshot_id())

    # recording -----------------------------------------------------------

    def is_improvement(self, outcome: ExecutionOutcome) -> bool:
        """Whether ``outcome`` strictly beats the incumbent best objective value."""
        value = self._objective_value(outcome)
        return value is not None and self.objective.better(value, self.value_of(self.anchors()[0]))

    def record_iteration(self, rec: IterationRecord) -> IterationRecord:
        """Append ``rec``; computes ``improved`` against the incumbent best and sets usage counters."""
        expected = self.last_iteration + 1
        if rec.iteration <= self.last_iteration:
            raise DuplicateIteration(f"iteration {rec.iteration} already recorded")
        if rec.iteration != expected:
            raise NonContiguousIteration(f"expected iteration {expected}, got {rec.iteration}")
        rec.improved = self.is_improvement(rec.outcome)
        rec.objective_value = self._objective_value(rec.outcome)
        self.records.append(rec)
        for pid in rec.reference_set.paper_ids:
            self.counters[(pid, rec.iteration)] = UsageCount(int(rec.improved), int(not rec.improved))
        if self.log_path is not None:
            with self.log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(dict(rec.to_dict(), kind="record"), sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
        return rec

    # rewards -------------------------------------------------------------

    def batch_reward(self, paper_id: str, batch: int) -> float:
        if batch < 0:
            raise ValueError("batch index must be >= 0")
        horizon = self.batch_size * batch
        diff = total = 0
        for (pid, k), c in self.counters.items():
            if pid == paper_id and k <= horizon:
                diff += c.successes - c.failures
                total += c.attempts
        return diff / (total + 1)

    def used_papers(self, up_to_iteration: int) -> list[str]:
        return sorted({pid for (pid, k) in self.counters if k <= up_to_iteration})

    def refresh_rewards(self, iteration: int, mode: RewardMode = RewardMode.EMPIRICAL) -> RewardLedger:
        """Rewards visible at ``iteration``; recomputed only when the batch index advances."""
        b = batch_index(iteration, self.batch_size)
        key = (b, RewardMode(mode))
        if key in self._ledger_cache:
            return self._ledger_cache[key]
        used = self.used_papers(self.batch_size * b)
        if key[1] is RewardMode.ZERO:
            ledger = RewardLedger(b, {})
        elif key[1] is RewardMode.CONSTANT_ONE:
            ledger = RewardLedger(b, {pid: 1.0 for pid in used})
        else:
            ledger = RewardLedger(b, {pid: self.batch_reward(pid, b) for pid in used})
        if self.last_iteration >= self.batch_size * b:
            # only cache once the batch's contributing iterations are all recorded
            self._ledger_cache[key] = ledger
        return ledger

    # views ---------------------------------------------------------------

    def trajectory(self) -> MetricTrajectory:
        return MetricTrajectory(self.baseline_value, tuple(r.objective_value for r in self.records))

    def memory_context(self, window: int = LESSON_WINDOW) -> dict:
        best, _ = self.anchors()
        ctx = {"lessons": [f"iteration {r.iteration}: {r.lesson}" for r in self.records[-window:]],
               "best_iteration": best, "best_value": self.value_of(best)}
        if best:
            ctx["best_approach"] = self.records[best - 1].approach_summary
        return ctx

    # persistence ---------------------------------------------------------

    @classmethod
    def load(cls, log_path: Path, snapshots: Optional[SnapshotStore] = None, append: bool = False) -> "MemoryStore":
        """Replay a log into a fresh store (``append=True`` keeps writing to the same file)."""
        log_path = Path(log_path)
        lines = [line for line in log_path.read_text(encoding="utf-8").splitlines() if line.strip()]
        if not lines:
            raise StoreCorruption(f"{log_path} is empty")
        try:
            header = json.loads(lines[0])
            if header.get("kind") != "header":
                raise StoreCorruption("first log line is not a header")
            store = cls(Objective.from_dict(header["objective"]), header["baseline_metrics"],
                        header["baseline_snapshot"], header.get("batch_size", DEFAULT_BATCH_SIZE),
                        None, snapshots, _write_header=False)
            for line in lines[1:]:
                data = json.loads(line)
                rec = IterationRecord.from_dict(data)
                stored_improved = rec.improved
                store.record_iteration(rec)
                if rec.improved != stored_improved:
                    raise StoreCorruption(f"iteration {rec.iteration}: improved flag disagrees with replay")
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise StoreCorruption(f"{log_path}: {exc}") from exc
        if append:
            store.log_path = log_path
        return store
