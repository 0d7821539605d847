"""Blueprint application, code audit with rebuttal, and bounded-retry execution."""

from __future__ import annotations

import hashlib
import logging
import math
import random
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol, Sequence

import yaml

from .agents import AgentBackend, AgentRole, Phase, Transcript, query
from .errors import ApplyFailure, BackendUnavailable, SchemaViolation
from .ideation import Blueprint, PlanStatus
from .snapshots import CodebaseSnapshot, SnapshotStore

logger = logging.getLogger(__name__)

MAX_RETRIES = 10


class Status(str, Enum):
    SUCCESS = "success"
    FAILURE = "failure"


@dataclass(frozen=True)
class Finding:
    path: str
    description: str


@dataclass
class ValidationVerdict:
    passed: bool
    findings: list[Finding] = field(default_factory=list)
    rebuttal_round: int = 0

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"


@dataclass
class ExecutorResult:
    success: bool
    metrics: dict = field(default_factory=dict)
    logs: str = ""


@dataclass
class ExecutionOutcome:
    status: Status
    metrics: dict = field(default_factory=dict)
    logs: str = ""
    validation_attempts: int = 0
    execution_attempts: int = 0
    snapshot_id: Optional[str] = None

    def __post_init__(self):
        self.status = Status(self.status)
        if self.validation_attempts > MAX_RETRIES or self.execution_attempts > MAX_RETRIES:
            raise ValueError("attempt counters exceed the retry bound")

    @property
    def succeeded(self) -> bool:
        return self.status is Status.SUCCESS

    def to_dict(self) -> dict:
        return {"status": self.status.value, "metrics": dict(sorted(self.metrics.items())), "logs": self.logs,
                "validation_attempts": self.validation_attempts, "execution_attempts": self.execution_attempts,
                "snapshot_id": self.snapshot_id}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExecutionOutcome":
        return cls(Status(data["status"]), dict(data.get("metrics", {})), data.get("logs", ""),
                   int(data.get("validation_attempts", 0)), int(data.get("execution_attempts", 0)),
                   data.get("snapshot_id"))


class Executor(Protocol):
    def execute(self, snapshot: CodebaseSnapshot, attempt: int = 1) -> ExecutorResult: ...


@dataclass(frozen=True)
class Effect:
    keyword: str
    metric: str
    delta: float


def load_effect_table(path: Path) -> list[Effect]:
    """Effect table file: a YAML/JSON list of ``{keyword, metric, effect}`` objects."""
    rows = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or []
    return [Effect(r["keyword"], r["metric"], float(r["effect"])) for r in rows]


class SimulatedExecutor:
    """Stand-in for training: metrics follow an additive response model.

    For every change description in the snapshot's lineage, each effect whose
    keyword occurs in it (case-insensitive) adds its delta to its metric.
    Gaussian noise and Bernoulli failures are drawn from an RNG seeded by
    (seed, snapshot id, attempt), so results are reproducible.
    """

    def __init__(self, base_quality: Mapping[str, float], effects: Iterable[Effect] = (),
                 noise_scale: float = 0.0, seed: int = 0, failure_probability: float = 0.0):
        self.base_quality = dict(base_quality)
        self.effects = [e if isinstance(e, Effect) else Effect(**e) for e in effects]
        self.noise_scale = noise_scale
        self.seed = seed
        self.failure_probability = failure_probability

    def expected_metrics(self, snapshot: CodebaseSnapshot) -> dict[str, float]:
        metrics = dict(self.base_quality)
        for desc in snapshot.lineage:
            low = desc.lower()
            for eff in self.effects:
                if eff.keyword.lower() in low:
                    metrics[eff.metric] = metrics.get(eff.metric, 0.0) + eff.delta
        return metrics

    def execute(self, snapshot: CodebaseSnapshot, attempt: int = 1) -> ExecutorResult:
        h = hashlib.sha256(f"{self.seed}:{snapshot.snapshot_id}:{attempt}".encode()).digest()
        rng = random.Random(int.from_bytes(h[:8], "little"))
        if self.failure_probability > 0 and rng.random() < self.failure_probability:
            return ExecutorResult(False, {}, f"simulated failure (attempt {attempt})")
        metrics = self.expected_metrics(snapshot)
        if self.noise_scale > 0:
            metrics = {k: v + rng.gauss(0.0, self.noise_scale) for k, v in sorted(metrics.items())}
        return ExecutorResult(True, metrics, f"simulated run of {snapshot.snapshot_id} (attempt {attempt})")


class ScriptedExecutor:
    """Returns queued results in order; repeats the last one when exhausted."""

    def __init__(self, results: Sequence[ExecutorResult]):
        if not results:
            raise ValueError("need at least one scripted result")
        self.results = list(results)
        self.calls = 0

    def execute(self, snapshot: CodebaseSnapshot, attempt: int = 1) -> ExecutorResult:
        res = self.results[min(self.calls, len(self.results) - 1)]
        self.calls += 1
        return res


def parse_metrics_file(text: str) -> dict[str, float]:
    """``name<TAB>value`` per line; blank lines and ``#`` comments skipped."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2:
            raise ValueError(f"metrics line {n} is not name<TAB>value: {line!r}")
        value = float(parts[1])
        if not math.isfinite(value):
            raise ValueError(f"metric {parts[0]} is not finite")
        out[parts[0].strip()] = value
    return out


class ContainerExecutor:
    """Runs a command inside a container with the snapshot mounted read-only.

    ``command`` is a template formatted with ``{workdir}`` and ``{outdir}``
    (the in-container mount points). Metrics are read from ``metrics_file``
    inside the output directory.
    """

    def __init__(self, image: str, command: str, timeout: float = 3600.0, runtime: str = "docker",
                 metrics_file: str = "metrics.tsv", extra_args: Sequence[str] = ("--network", "none"),
                 workdir: str = "/workspace", outdir: str = "/output"):
        self.image = image
        self.command = command
        self.timeout = timeout
        self.runtime = runtime
        self.metrics_file = metrics_file
        self.extra_args = list(extra_args)
        self.workdir = workdir
        self.outdir = outdir

    def build_argv(self, host_src: Path, host_out: Path) -> list[str]:
        cmd = self.command.format(workdir=self.workdir, outdir=self.outdir)
        return [self.runtime, "run", "--rm", *self.extra_args,
                "-v", f"{host_src}:{self.workdir}:ro", "-v", f"{host_out}:{self.outdir}:rw",
                "-w", self.workdir, self.image, "sh", "-c", cmd]

    def execute(self, snapshot: CodebaseSnapshot, attempt: int = 1) -> ExecutorResult:
        with tempfile.TemporaryDirectory(prefix="refineloop-") as tmp:
            src = snapshot.materialize(Path(tmp) / "src")
            out = Path(tmp) / "out"
            out.mkdir()
            argv = self.build_argv(src, out)
            logger.info("running %s", shlex.join(argv))
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            except subprocess.TimeoutExpired as exc:
                return ExecutorResult(False, {}, f"timeout after {self.timeout}s\n{exc.stdout or ''}")
            except OSError as exc:
                return ExecutorResult(False, {}, f"container runtime unavailable: {exc}")
            logs = (proc.stdout or "") + (proc.stderr or "")
            if proc.returncode != 0:
                return ExecutorResult(False, {}, logs)
            mpath = out / self.metrics_file
            if not mpath.exists():
                return ExecutorResult(False, {}, logs + f"\nmissing {self.metrics_file}")
            try:
                metrics = parse_metrics_file(mpath.read_text(encoding="utf-8"))
            except ValueError as exc:
                return ExecutorResult(False, {}, logs + f"\n{exc}")
            return ExecutorResult(True, metrics, logs)


def apply_blueprint(base: CodebaseSnapshot, bp: Blueprint, backend: AgentBackend,
                    transcript: Optional[Transcript] = None, base_iteration: Optional[int] = None) -> CodebaseSnapshot:
    """Ask the code expert for the full new content of every target file."""
    if bp.validation is not PlanStatus.APPROVED:
        raise ValueError("blueprint must be approved before it is applied")
    transcript = transcript if transcript is not None else Transcript(Phase.EXECUTION)
    targets = bp.target_files
    ctx = {"task": "apply", "blueprint": bp.to_dict(),
           "files": {p: base.files[p] for p in targets if p in base.files}}

    def check(payload):
        got = {f["path"] for f in payload["files"]}
        missing = [p for p in targets if p not in got]
        if missing:
            raise SchemaViolation(f"no content returned for {missing}")

    try:
        msg = query(backend, AgentRole.CODE_EXPERT, transcript, ctx, schema="code", validate=check)
    except SchemaViolation as exc:
        raise ApplyFailure(str(exc)) from exc
    transcript.append(msg)
    changes = {f["path"]: f["content"] for f in msg.payload["files"] if f["path"] in targets}
    return base.derive(changes, base.base_iteration if base_iteration is None else base_iteration,
                       bp.descriptions())


def validate_code(snap: CodebaseSnapshot, bp: Blueprint, backend: AgentBackend,
                  transcript: Optional[Transcript] = None) -> ValidationVerdict:
    """Audit the changed files; on failure the code expert may rebut once."""
    transcript = transcript if transcript is not None else Transcript(Phase.EXECUTION)
    changes = {p: snap.files[p] for p in bp.target_files if p in snap.files}
    ctx = {"blueprint": bp.to_dict(), "changes": changes}
    msg = query(backend, AgentRole.CODE_VALIDATOR, transcript, ctx)
    transcript.append(msg)
    findings = [Finding(f["path"], f["description"]) for f in msg.payload.get("findings", [])]
    if msg.payload["verdict"] == "pass":
        return ValidationVerdict(True, findings, 0)

    reb = query(backend, AgentRole.CODE_EXPERT, transcript,
                {"task": "rebut", "blueprint": bp.to_dict(), "changes": changes,
                 "findings": [f.__dict__ for f in findings]}, schema="rebuttal")
    transcript.append(reb)
    if not reb.payload["rebut"]:
        return ValidationVerdict(False, findings, 1)
    again = query(backend, AgentRole.CODE_VALIDATOR, transcript,
                  dict(ctx, findings=[f.__dict__ for f in findings], rebuttal=reb.payload.get("arguments", "")))
    transcript.append(again)
    findings2 = [Finding(f["path"], f["description"]) for f in again.payload.get("findings", [])]
    return ValidationVerdict(again.payload["verdict"] == "pass", findings2, 1)


def run_iteration_execution(
    base: CodebaseSnapshot,
    bp: Blueprint,
    executor: Executor,
    backend: AgentBackend,
    objective_metric: str,
    max_retries: int = MAX_RETRIES,
    skip_validation: bool = False,
    transcript: Optional[Transcript] = None,
    snapshots: Optional[SnapshotStore] = None,
    base_iteration: Optional[int] = None,
) -> ExecutionOutcome:
    """Apply/validate until a pass, then execute until success, each within ``max_retries``.

    Budget exhaustion yields a failure outcome rather than an exception.
    """
    if not 1 <= max_retries <= MAX_RETRIES:
        raise ValueError(f"max_retries must be within 1..{MAX_RETRIES}")
    transcript = transcript if transcript is not None else Transcript(Phase.EXECUTION)
    logs: list[str] = []
    snap: Optional[CodebaseSnapshot] = None
    v_attempts = 0
    for _ in range(max_retries):
        if not skip_validation:
            v_attempts += 1
        try:
            candidate = apply_blueprint(base, bp, backend, transcript, base_iteration)
        except (ApplyFailure, BackendUnavailable) as exc:
            logs.append(f"apply failed: {exc}")
            continue
        if skip_validation:
            snap = candidate
            break
        try:
            verdict = validate_code(candidate, bp, backend, transcript)
        except (SchemaViolation, BackendUnavailable) as exc:
            logs.append(f"validation errored: {exc}")
            continue
        if verdict.passed:
            snap = candidate
            break
        logs.append("validation failed: " + "; ".join(f"{f.path}: {f.description}" for f in verdict.findings))
    if snap is None:
        return ExecutionOutcome(Status.FAILURE, {}, "\n".join(logs), v_attempts, 0)

    if snapshots is not None:
        snapshots.put(snap)
    for attempt in range(1, max_retries + 1):
        result = executor.execute(snap, attempt)
        if result.success and objective_metric in result.metrics:
            logs.append(result.logs)
            return ExecutionOutcome(Status.SUCCESS, dict(result.metrics), "\n".join(logs),
                                    v_attempts, attempt, snap.snapshot_id)
        logs.append(f"execution attempt {attempt} failed: {result.logs}")
    return ExecutionOutcome(Status.FAILURE, {}, "\n".join(logs), v_attempts, max_retries, snap.snapshot_id)
