"""The closed refinement loop, its configuration, ablation wiring and reports."""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

import yaml

from .agents import AgentBackend, AutoResponder, Phase, RemoteChatClient, ScriptedBackend, Transcript
from .corpus import (
    CandidatePool,
    EuropePMCSource,
    FixtureSource,
    OpenReviewSource,
    VenueAllowlist,
    build_pool,
)
from .embedding import EmbeddingCache, HashMockEmbedder, RemoteEmbeddingClient, serialize_codebase
from .errors import (
    AllProposalsRejected,
    BackendUnavailable,
    EmptyStore,
    InconsistentAblations,
    InvalidBlueprint,
    RefineLoopError,
    SchemaViolation,
    ValidationExhausted,
)
from .execution import (
    ContainerExecutor,
    ExecutionOutcome,
    Executor,
    SimulatedExecutor,
    Status,
    load_effect_table,
    run_iteration_execution,
)
from .ideation import PlanStatus, debate, draft_blueprint, minimal_blueprint, speaker_string, validate_plan
from .memory import IterationRecord, MemoryStore, RewardMode
from .metrics import FrameworkMetrics, Objective, framework_metrics
from .scoring import DomainCategory, ScoringConfig, embed_pool, rank_top, score_pool
from .selection import ReferenceSet, fallback_selection, select_references, single_paper_selection
from .snapshots import CodebaseSnapshot, SnapshotStore

logger = logging.getLogger(__name__)

ABLATION_FLAGS = frozenset({
    "no_sim_score", "no_agent_val", "single_paper", "only_h", "only_m", "only_l",
    "no_debate", "no_critic", "no_impl_arch", "no_plan_val", "no_code_val",
    "no_memory", "no_reward", "reward_const_1",
})

LOOP_STAGES = ("score", "selection", "transcript", "blueprint", "outcome", "record")


def derive_seed(root: int, module: str, iteration: int = 0) -> int:
    h = hashlib.sha256(f"{root}:{module}:{iteration}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def check_ablations(flags) -> frozenset:
    flags = frozenset(flags)
    unknown = flags - ABLATION_FLAGS
    if unknown:
        raise InconsistentAblations(f"unknown ablation flags: {sorted(unknown)}")
    if len(flags & {"only_h", "only_m", "only_l"}) > 1:
        raise InconsistentAblations("only one of only_h/only_m/only_l may be set")
    if {"no_reward", "reward_const_1"} <= flags:
        raise InconsistentAblations("no_reward and reward_const_1 are mutually exclusive")
    if "single_paper" in flags and flags & {"only_h", "only_m", "only_l"}:
        raise InconsistentAblations("single_paper cannot be combined with only_* flags")
    return flags


@dataclass
class PoolConfig:
    target_size: int = 200
    fixture_path: Optional[str] = None
    live_sources: list = field(default_factory=list)  # "europepmc", "openreview"
    allowlist_path: Optional[str] = None
    rebuild_each_iteration: bool = False
    keywords: list = field(default_factory=list)  # search keywords; defaults to the domain keywords


@dataclass
class RunConfig:
    target_codebase_path: str
    domain_keywords: list
    objective: Objective
    iteration_budget: int = 10
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    agent: dict = field(default_factory=lambda: {"kind": "scripted"})
    embedder: dict = field(default_factory=lambda: {"kind": "hash", "dim": 256})
    executor: dict = field(default_factory=lambda: {"kind": "simulated"})
    seed: int = 0
    ablations: frozenset = frozenset()
    pool: PoolConfig = field(default_factory=PoolConfig)
    baseline_metrics: Optional[dict] = None
    output_dir: str = "run"
    max_retries: int = 10
    plan_rounds: int = 3
    base_dir: Optional[str] = None  # relative paths resolve against this

    def __post_init__(self):
        if self.iteration_budget < 1:
            raise ValueError("iteration_budget must be >= 1")
        if not self.domain_keywords:
            raise ValueError("domain_keywords must be non-empty")
        self.ablations = check_ablations(self.ablations)

    def resolve(self, path: Optional[str]) -> Optional[Path]:
        if path is None:
            return None
        p = Path(path)
        if not p.is_absolute() and self.base_dir:
            p = Path(self.base_dir) / p
        return p

    @classmethod
    def from_dict(cls, data: Mapping, base_dir: Optional[str] = None) -> "RunConfig":
        data = dict(data)
        scoring = dict(data.pop("scoring", {}) or {})
        if "lambda" in scoring:
            scoring["reward_weight"] = scoring.pop("lambda")
        pool = PoolConfig(**(data.pop("pool", {}) or {}))
        obj = data.pop("objective")
        objective = obj if isinstance(obj, Objective) else Objective.from_dict(obj)
        return cls(objective=objective, scoring=ScoringConfig(**scoring), pool=pool,
                   ablations=frozenset(data.pop("ablations", []) or []),
                   base_dir=data.pop("base_dir", base_dir), **data)

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        path = Path(path)
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
        return cls.from_dict(data, base_dir=str(path.parent.resolve()))

    def to_dict(self) -> dict:
        s = self.scoring
        return {
            "target_codebase_path": self.target_codebase_path,
            "domain_keywords": list(self.domain_keywords),
            "objective": self.objective.to_dict(),
            "iteration_budget": self.iteration_budget,
            "scoring": {"lambda": s.reward_weight, "momentum_best": s.momentum_best,
                        "momentum_second": s.momentum_second, "top_k": s.top_k, "batch_size": s.batch_size,
                        "weight_profiles": {k.value: [v.w_d, v.w_a] for k, v in s.weight_profiles.items()},
                        "quotas": {k.value: v for k, v in s.quotas.items()}, "strict_quotas": s.strict_quotas},
            "agent": self.agent,
            "embedder": self.embedder,
            "executor": self.executor,
            "seed": self.seed,
            "ablations": sorted(self.ablations),
            "pool": dict(self.pool.__dict__),
            "baseline_metrics": self.baseline_metrics,
            "output_dir": self.output_dir,
            "max_retries": self.max_retries,
            "plan_rounds": self.plan_rounds,
        }


@dataclass(frozen=True)
class Pipeline:
    """Behavioural switches derived from the ablation flags."""

    reward_mode: RewardMode = RewardMode.EMPIRICAL
    random_ranking: bool = False
    agent_validation: bool = True
    single_paper: bool = False
    quotas: Mapping = field(default_factory=lambda: {DomainCategory.H: 2, DomainCategory.M: 1, DomainCategory.L: 2})
    debate: bool = True
    critic: bool = True
    implement_architect: bool = True
    plan_validation: bool = True
    code_validation: bool = True
    memory: bool = True


def apply_ablations(config: RunConfig) -> Pipeline:
    flags = check_ablations(config.ablations)
    quotas = dict(config.scoring.quotas)
    total = sum(quotas.values())
    for flag, cat in (("only_h", DomainCategory.H), ("only_m", DomainCategory.M), ("only_l", DomainCategory.L)):
        if flag in flags:
            quotas = {c: (total if c is cat else 0) for c in DomainCategory}
    mode = RewardMode.EMPIRICAL
    if "no_reward" in flags:
        mode = RewardMode.ZERO
    elif "reward_const_1" in flags:
        mode = RewardMode.CONSTANT_ONE
    return Pipeline(
        reward_mode=mode,
        random_ranking="no_sim_score" in flags,
        agent_validation="no_agent_val" not in flags,
        single_paper="single_paper" in flags,
        quotas=quotas,
        debate="no_debate" not in flags,
        critic="no_critic" not in flags,
        implement_architect="no_impl_arch" not in flags,
        plan_validation="no_plan_val" not in flags,
        code_validation="no_code_val" not in flags,
        memory="no_memory" not in flags,
    )


# component factories -------------------------------------------------------

def make_backend(config: RunConfig) -> AgentBackend:
    spec = dict(config.agent)
    kind = spec.pop("kind", "scripted")
    if kind == "scripted":
        fallback = AutoResponder(derive_seed(config.seed, "agents"),
                                 critic_reject_rate=spec.get("critic_reject_rate", 0.0),
                                 critic_revise_rate=spec.get("critic_revise_rate", 0.0))
        script = config.resolve(spec.get("script"))
        if script is not None:
            return ScriptedBackend.from_file(script, fallback)
        return ScriptedBackend({}, fallback)
    if kind == "remote":
        return RemoteChatClient(spec["endpoint"], spec["model"], spec.get("api_key_env", "REFINELOOP_CHAT_API_KEY"),
                                spec.get("timeout", 120.0), spec.get("max_retries", 3), spec.get("max_tokens", 4096),
                                spec.get("temperatures"))
    raise ValueError(f"unknown agent backend {kind!r}")


def make_embedder(config: RunConfig):
    spec = dict(config.embedder)
    kind = spec.pop("kind", "hash")
    if kind == "hash":
        return HashMockEmbedder(spec.get("dim", 256), spec.get("seed", 0))
    if kind == "remote":
        return RemoteEmbeddingClient(spec["endpoint"], spec["model"], spec["dim"],
                                     spec.get("api_key_env", "REFINELOOP_EMBED_API_KEY"))
    raise ValueError(f"unknown embedder {kind!r}")


def make_executor(config: RunConfig) -> Executor:
    spec = dict(config.executor)
    kind = spec.pop("kind", "simulated")
    if kind == "simulated":
        effects = spec.get("effects", [])
        if isinstance(effects, str):
            effects = load_effect_table(config.resolve(effects))
        base = spec.get("base_quality") or config.baseline_metrics or {config.objective.metric_name: 0.0}
        return SimulatedExecutor(base, effects, spec.get("noise_scale", 0.0),
                                 derive_seed(config.seed, "executor"), spec.get("failure_probability", 0.0))
    if kind == "container":
        return ContainerExecutor(spec["image"], spec["command"], spec.get("timeout", 3600.0),
                                 spec.get("runtime", "docker"), spec.get("metrics_file", "metrics.tsv"))
    raise ValueError(f"unknown executor {kind!r}")


def make_sources(config: RunConfig) -> list:
    allowlist = VenueAllowlist.load(config.resolve(config.pool.allowlist_path)) if config.pool.allowlist_path else None
    sources = []
    if config.pool.fixture_path:
        sources.append(FixtureSource(config.resolve(config.pool.fixture_path)))
    for name in config.pool.live_sources:
        if name == "europepmc":
            sources.append(EuropePMCSource(allowlist, fetch_full_text=True))
        elif name == "openreview":
            sources.append(OpenReviewSource(allowlist))
        else:
            raise ValueError(f"unknown literature source {name!r}")
    if not sources:
        raise ValueError("no literature source configured")
    return sources


# report ------------------------------------------------------------------

@dataclass
class ReportEntry:
    iteration: int
    references: list
    approach: str
    metrics: dict
    status: str
    improved: bool
    change_digest: str
    lesson: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class AnalysisReport:
    objective: Objective
    baseline: float
    entries: list
    metrics: FrameworkMetrics
    best_iteration: int
    trajectory: list  # rows of (iteration, value or None, best so far)

    def to_dict(self) -> dict:
        return {
            "objective": self.objective.to_dict(),
            "baseline": self.baseline,
            "entries": [e.to_dict() for e in self.entries],
            "summary": {"framework_metrics": self.metrics.to_dict(), "best_iteration": self.best_iteration,
                        "trajectory": [list(r) for r in self.trajectory]},
        }

    def to_markdown(self) -> str:
        m = self.metrics
        name = self.objective.metric_name
        lines = [
            "# Iteration-wise analysis report",
            "",
            f"Objective: {name} ({self.objective.direction.value}); baseline {self.baseline:.4f}.",
            f"Best iteration: {self.best_iteration}.",
            "",
            "| NPG | NAUI | SIC | ESR |",
            "|---|---|---|---|",
            f"| {m.npg:.4f} | {m.naui:.4f} | {m.sic} | {m.esr:.3f} |",
            "",
            f"| iter | status | {name} | best so far | improved | change | references |",
            "|---|---|---|---|---|---|---|",
        ]
        for e, (_, value, best) in zip(self.entries, self.trajectory):
            v = "-" if value is None else f"{value:.4f}"
            lines.append(f"| {e.iteration} | {e.status} | {v} | {best:.4f} | {'yes' if e.improved else 'no'} "
                         f"| {e.change_digest or '-'} | {', '.join(e.references)} |")
        lines.append("")
        for e in self.entries:
            lines += [f"## Iteration {e.iteration}", "", f"- Approach: {e.approach or '(none)'}",
                      f"- Outcome: {e.status}; lesson: {e.lesson}", ""]
        return "\n".join(lines)

    def write(self, out_dir: Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        md = out_dir / "report.md"
        js = out_dir / "report.json"
        md.write_text(self.to_markdown(), encoding="utf-8")
        js.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return md, js


def generate_report(store: MemoryStore, config: Optional[RunConfig] = None) -> AnalysisReport:
    if not store.records:
        raise EmptyStore("memory store has no records")
    obj = store.objective
    entries = [ReportEntry(r.iteration, r.reference_set.paper_ids, r.approach_summary,
                           dict(sorted(r.outcome.metrics.items())), r.outcome.status.value, r.improved,
                           r.blueprint_digest, r.lesson) for r in store.records]
    traj = store.trajectory()
    rows = []
    best = traj.baseline
    for r, v in zip(store.records, traj.values):
        if v is not None and obj.better(v, best):
            best = v
        rows.append((r.iteration, v, best))
    return AnalysisReport(obj, traj.baseline, entries, framework_metrics(traj, obj), store.anchors()[0], rows)


# the loop ------------------------------------------------------------------

class EventLog:
    """Sequence-numbered stage events, one JSON object per line."""

    def __init__(self, path: Optional[Path]):
        self.path = path
        self.seq = 0
        self.events: list[dict] = []
        if path is not None:
            path.write_text("", encoding="utf-8")

    def emit(self, iteration: int, stage: str, **data) -> None:
        self.seq += 1
        ev = {"seq": self.seq, "iteration": iteration, "stage": stage, **data}
        self.events.append(ev)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")


def _lesson(outcome: ExecutionOutcome, improved: bool, approach: str, metric: str, failure: str = "") -> str:
    if failure:
        return f"aborted before execution ({failure}); avoid repeating this direction unchanged"
    if not outcome.succeeded:
        return f"execution failed after {outcome.validation_attempts} validation / {outcome.execution_attempts} run attempts"
    value = outcome.metrics.get(metric)
    if improved:
        return f"new best {metric}={value:.4f}: keep building on '{approach[:80]}'"
    return f"{metric}={value:.4f} did not beat the incumbent; '{approach[:80]}' was ineffective"


@dataclass
class RunState:
    config: RunConfig
    pipeline: Pipeline
    out_dir: Path
    pool: CandidatePool
    store: MemoryStore
    snapshots: SnapshotStore
    baseline: CodebaseSnapshot
    backend: AgentBackend
    executor: Executor
    cache: EmbeddingCache
    events: EventLog


def setup_run(config: RunConfig, out_dir: Optional[Path] = None) -> RunState:
    pipeline = apply_ablations(config)
    out = Path(out_dir) if out_dir is not None else config.resolve(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sub in ("transcripts", "scores"):
        (out / sub).mkdir(exist_ok=True)
    snapshots = SnapshotStore(out / "snapshots")
    baseline = CodebaseSnapshot.from_directory(config.resolve(config.target_codebase_path))
    if not baseline.files:
        raise ValueError(f"target codebase {config.target_codebase_path} has no readable files")
    snapshots.put(baseline)
    backend = make_backend(config)
    executor = make_executor(config)
    baseline_metrics = config.baseline_metrics
    if baseline_metrics is None:
        res = executor.execute(baseline, 1)
        if not res.success or config.objective.metric_name not in res.metrics:
            raise RefineLoopError(f"baseline run failed: {res.logs}")
        baseline_metrics = res.metrics
    keywords = config.pool.keywords or config.domain_keywords
    pool = build_pool(keywords, make_sources(config), config.pool.target_size)
    embedder = make_embedder(config)
    cache = EmbeddingCache(embedder)
    store = MemoryStore(config.objective, baseline_metrics, baseline.snapshot_id, config.scoring.batch_size,
                        out / "memory.jsonl", snapshots)
    return RunState(config, pipeline, out, pool, store, snapshots, baseline, backend, executor, cache,
                    EventLog(out / "events.jsonl"))


def _write_transcript(state: RunState, iteration: int, name: str, transcript: Transcript) -> None:
    if transcript.messages:
        path = state.out_dir / "transcripts" / f"iter_{iteration:04d}_{name}.jsonl"
        path.write_text(transcript.to_jsonl(), encoding="utf-8")


def run_iteration(state: RunState, iteration: int, pool_embeddings) -> IterationRecord:
    cfg, pipe, store = state.config, state.pipeline, state.store
    metric = cfg.objective.metric_name

    ledger = store.refresh_rewards(iteration, pipe.reward_mode)
    anchor_ids = store.anchors() if pipe.memory else (0, 0)
    vecs = []
    for it in anchor_ids:
        snap = state.snapshots.get(store.snapshot_id_of(it))
        vecs.append(state.cache.get(serialize_codebase(snap.files, state.cache.backend.max_chars)))
    scores = score_pool(pool_embeddings, tuple(vecs), ledger.rewards, iteration, cfg.scoring)
    score_path = state.out_dir / "scores" / f"iter_{iteration:04d}.jsonl"
    score_path.write_text("".join(json.dumps(dict(s.to_dict(), rank=i + 1), sort_keys=True) + "\n"
                                  for i, s in enumerate(scores)), encoding="utf-8")
    state.events.emit(iteration, "score", batch=ledger.batch, anchors=list(anchor_ids),
                      reward_mode=pipe.reward_mode.value, n_scored=len(scores))

    scoring_cfg = replace(cfg.scoring, quotas=dict(pipe.quotas))
    if pipe.random_ranking:
        order = list(scores)
        random.Random(derive_seed(cfg.seed, "ranking", iteration)).shuffle(order)
        top = rank_top(order, scoring_cfg, presorted=True)
    else:
        top = rank_top(scores, scoring_cfg)
    sel_t = Transcript(Phase.SELECTION)
    if pipe.single_paper:
        refs = single_paper_selection(top, iteration)
    elif not pipe.agent_validation:
        refs = fallback_selection(top, iteration, pipe.quotas)
    else:
        refs = select_references(top, state.pool, state.backend, iteration, pipe.quotas,
                                 cfg.scoring.strict_quotas, transcript=sel_t)
    _write_transcript(state, iteration, "selection", sel_t)
    state.events.emit(iteration, "selection", refs=refs.paper_ids, top_k=[s.paper_id for s in top],
                      fallback=refs.via_fallback)

    foundation_id = store.foundation_snapshot_id() if pipe.memory else store.baseline_snapshot_id
    foundation = state.snapshots.get(foundation_id)
    memory_ctx = store.memory_context() if pipe.memory else {}
    deb_t, doc_t, exe_t = Transcript(Phase.DEBATE), Transcript(Phase.DOCUMENTATION), Transcript(Phase.EXECUTION)
    approach, digest, failure = "", "", ""
    outcome: Optional[ExecutionOutcome] = None
    try:
        try:
            decision, _ = debate(refs, memory_ctx, state.backend, state.pool, metric,
                                 no_debate=not pipe.debate, no_critic=not pipe.critic, transcript=deb_t)
        finally:
            _write_transcript(state, iteration, "debate", deb_t)
            state.events.emit(iteration, "transcript", speakers=speaker_string(deb_t),
                              turns=len(deb_t.messages))
        approach = decision.chosen_proposal.description
        try:
            if pipe.implement_architect:
                bp = draft_blueprint(decision, refs, foundation, state.backend, state.pool, doc_t)
            else:
                bp = minimal_blueprint(decision, foundation)
            if pipe.plan_validation:
                bp = validate_plan(bp, state.backend, refs, foundation, cfg.plan_rounds, state.pool, doc_t)
            else:
                bp.validation = PlanStatus.APPROVED
                bp.validator_notes = "auto-approved"
            digest = bp.digest()
        finally:
            _write_transcript(state, iteration, "documentation", doc_t)
            state.events.emit(iteration, "blueprint", digest=digest, turns=len(doc_t.messages))
        outcome = run_iteration_execution(foundation, bp, state.executor, state.backend, metric, cfg.max_retries,
                                          skip_validation=not pipe.code_validation, transcript=exe_t,
                                          snapshots=state.snapshots, base_iteration=iteration)
    except (AllProposalsRejected, ValidationExhausted, SchemaViolation, BackendUnavailable, InvalidBlueprint) as exc:
        failure = type(exc).__name__
        logger.warning("iteration %d aborted: %s", iteration, exc)
        outcome = ExecutionOutcome(Status.FAILURE, {}, f"{failure}: {exc}")
    _write_transcript(state, iteration, "execution", exe_t)
    state.events.emit(iteration, "outcome", status=outcome.status.value,
                      metrics=dict(sorted(outcome.metrics.items())), foundation=foundation_id,
                      validation_attempts=outcome.validation_attempts, execution_attempts=outcome.execution_attempts)

    lesson = _lesson(outcome, store.is_improvement(outcome), approach, metric, failure)
    rec = IterationRecord(iteration, refs, approach, outcome, digest, f"transcripts/iter_{iteration:04d}",
                          lesson=lesson)
    rec = store.record_iteration(rec)
    state.events.emit(iteration, "record", improved=rec.improved, anchors=list(store.anchors()))
    return rec


def run(config: RunConfig, out_dir: Optional[Path] = None,
        observer: Optional[Callable[[int, RunState], None]] = None) -> tuple[MemoryStore, AnalysisReport]:
    """Run the full loop for ``config.iteration_budget`` iterations and write the report."""
    state = setup_run(config, out_dir)
    pool_embeddings = embed_pool(state.pool, config.domain_keywords, state.cache.get)
    for i in range(1, config.iteration_budget + 1):
        if config.pool.rebuild_each_iteration and i > 1:
            state.pool = build_pool(config.pool.keywords or config.domain_keywords, make_sources(config),
                                    config.pool.target_size, created_iteration=i)
            pool_embeddings = embed_pool(state.pool, config.domain_keywords, state.cache.get)
        run_iteration(state, i, pool_embeddings)
        if observer is not None:
            observer(i, state)
    report = generate_report(state.store, config)
    report.write(state.out_dir)
    return state.store, report
