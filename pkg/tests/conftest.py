from __future__ import annotations

from pathlib import Path

import pytest

from refineloop.agents import AutoResponder, ScriptedBackend
from refineloop.corpus import CandidatePool, PaperRecord
from refineloop.orchestrator import RunConfig
from refineloop.scoring import DomainCategory, PaperScore
from refineloop.synthetic import generate_workload


def make_paper(pid: str, **kw) -> PaperRecord:
    defaults = dict(
        title=f"Paper {pid}",
        abstract=f"Abstract of {pid} about spatial transcriptomics.",
        methods_text=f"Methods of {pid}: graph attention layers.",
        venue="Bioinformatics",
        venue_tier="Q1Journal",
        has_full_text=True,
        code_url=f"https://github.com/x/{pid}",
        keywords=("spatial transcriptomics",),
    )
    defaults.update(kw)
    return PaperRecord(pid, **defaults)


def make_score(pid: str, cat, total: float, iteration: int = 1) -> PaperScore:
    return PaperScore(pid, total, total, total, 0.0, total, DomainCategory(cat), iteration)


def pool_for(scores) -> CandidatePool:
    return CandidatePool([make_paper(s.paper_id) for s in scores], ["spatial transcriptomics"], max(200, len(scores)))


def auto_backend(seed: int = 0, **kw) -> ScriptedBackend:
    return ScriptedBackend({}, AutoResponder(seed, **kw))


@pytest.fixture(scope="session")
def workload(tmp_path_factory):
    return generate_workload(tmp_path_factory.mktemp("workload"), seed=0)


def workload_config(wl, budget: int = 5, seed: int = 0, **overrides) -> RunConfig:
    data = {
        "target_codebase_path": str(wl.codebase_dir),
        "domain_keywords": wl.domain_keywords,
        "objective": {"metric_name": "ARI", "direction": "maximize"},
        "iteration_budget": budget,
        "seed": seed,
        "executor": {"kind": "simulated", "base_quality": {"ARI": 0.496}, "effects": str(wl.effects_path)},
        "pool": {"target_size": 200, "fixture_path": str(wl.fixture_dir)},
    }
    data.update(overrides)
    return RunConfig.from_dict(data)


@pytest.fixture
def config_factory(workload):
    def factory(**kw):
        return workload_config(workload, **kw)
    return factory


def read_jsonl(path: Path) -> list[dict]:
    import json
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
