"""Reference-set selection: the evaluator agent picks per-category papers from the ranked top-k."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .agents import AgentBackend, AgentRole, Phase, Transcript, query
from .corpus import CandidatePool
from .errors import BackendUnavailable, InvalidReferenceSet, QuotaUnsatisfiable, SchemaViolation
from .scoring import CATEGORY_ORDER, DEFAULT_QUOTAS, DomainCategory, PaperScore

logger = logging.getLogger(__name__)


@dataclass
class ReferenceSet:
    """Papers grounding one iteration, grouped by domain category.

    With the default quotas this is the 2@H / 1@M / 2@L set.
    """

    slots: dict
    iteration: int
    rationale: dict = field(default_factory=dict)
    via_fallback: bool = False

    def __post_init__(self):
        self.slots = {DomainCategory(k): list(v) for k, v in self.slots.items()}
        for cat in CATEGORY_ORDER:
            self.slots.setdefault(cat, [])
        ids = self.paper_ids
        if not ids:
            raise InvalidReferenceSet("reference set is empty")
        if len(ids) != len(set(ids)):
            raise InvalidReferenceSet("reference set contains duplicate papers")

    @property
    def h_papers(self) -> list[str]:
        return self.slots[DomainCategory.H]

    @property
    def m_papers(self) -> list[str]:
        return self.slots[DomainCategory.M]

    @property
    def l_papers(self) -> list[str]:
        return self.slots[DomainCategory.L]

    @property
    def paper_ids(self) -> list[str]:
        return [pid for cat in CATEGORY_ORDER for pid in self.slots.get(cat, [])]

    def category_of(self, paper_id: str) -> DomainCategory:
        for cat in CATEGORY_ORDER:
            if paper_id in self.slots[cat]:
                return cat
        raise KeyError(paper_id)

    def check(self, top_scores: Sequence[PaperScore], quotas: Mapping[DomainCategory, int]) -> None:
        by_id = {s.paper_id: s for s in top_scores}
        for cat in CATEGORY_ORDER:
            for pid in self.slots[cat]:
                if pid not in by_id:
                    raise InvalidReferenceSet(f"{pid} is not in this iteration's ranked candidates")
                if by_id[pid].category is not cat:
                    raise InvalidReferenceSet(f"{pid} is {by_id[pid].category.value}, placed in {cat.value}")
            if len(self.slots[cat]) > quotas.get(cat, 0):
                raise InvalidReferenceSet(f"too many {cat.value} papers")

    def to_dict(self) -> dict:
        return {"H": self.h_papers, "M": self.m_papers, "L": self.l_papers,
                "iteration": self.iteration, "rationale": self.rationale, "via_fallback": self.via_fallback}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ReferenceSet":
        return cls({c.value: data.get(c.value, []) for c in CATEGORY_ORDER}, data["iteration"],
                   dict(data.get("rationale", {})), bool(data.get("via_fallback", False)))


def _by_category(top_scores: Sequence[PaperScore]) -> dict[DomainCategory, list[PaperScore]]:
    out = {c: [] for c in CATEGORY_ORDER}
    for s in sorted(top_scores, key=lambda s: (-s.total, s.paper_id)):
        out[s.category].append(s)
    return out


def _check_quotas(groups, quotas, strict: bool) -> None:
    for cat in CATEGORY_ORDER:
        if len(groups[cat]) < quotas.get(cat, 0):
            msg = f"only {len(groups[cat])} {cat.value} candidates for quota {quotas.get(cat, 0)}"
            if strict:
                raise QuotaUnsatisfiable(msg)
            logger.warning(msg)


def fallback_selection(top_scores: Sequence[PaperScore], iteration: int,
                       quotas: Optional[Mapping[DomainCategory, int]] = None) -> ReferenceSet:
    """Best-by-total papers per category, no agent involved."""
    quotas = quotas or DEFAULT_QUOTAS
    groups = _by_category(top_scores)
    slots = {cat: [s.paper_id for s in groups[cat][: quotas.get(cat, 0)]] for cat in CATEGORY_ORDER}
    return ReferenceSet(slots, iteration, via_fallback=True)


def select_references(
    top_scores: Sequence[PaperScore],
    pool: CandidatePool,
    backend: Optional[AgentBackend],
    iteration: int,
    quotas: Optional[Mapping[DomainCategory, int]] = None,
    strict: bool = False,
    transcript: Optional[Transcript] = None,
) -> ReferenceSet:
    """Fill each category's quota from the evaluator's per-category ranking.

    The evaluator sees title, abstract and methods text of every candidate.
    Ranked ids that are unknown or in the wrong category are ignored, and
    short rankings are topped up in score order. When the evaluator cannot
    answer (or ``backend`` is None) the score-order fallback is used.
    """
    quotas = dict(quotas or DEFAULT_QUOTAS)
    groups = _by_category(top_scores)
    _check_quotas(groups, quotas, strict)
    if backend is None:
        return fallback_selection(top_scores, iteration, quotas)

    transcript = transcript if transcript is not None else Transcript(Phase.SELECTION)
    papers = []
    for s in sorted(top_scores, key=lambda s: (-s.total, s.paper_id)):
        rec = pool.get(s.paper_id)
        papers.append({"paper_id": s.paper_id, "category": s.category.value, "score": round(s.total, 6),
                       "title": rec.title, "abstract": rec.abstract, "methods_text": rec.methods_text})
    context = {"papers": papers, "quotas": {c.value: quotas.get(c, 0) for c in CATEGORY_ORDER}}
    try:
        msg = query(backend, AgentRole.REF_EVALUATOR, transcript, context)
    except (SchemaViolation, BackendUnavailable) as exc:
        logger.warning("evaluator unavailable, using score-order fallback: %s", exc)
        return fallback_selection(top_scores, iteration, quotas)
    transcript.append(msg)

    rankings = msg.payload["rankings"]
    rationale_in = msg.payload.get("rationale", {})
    slots, rationale = {}, {}
    for cat in CATEGORY_ORDER:
        valid = {s.paper_id for s in groups[cat]}
        chosen: list[str] = []
        for pid in rankings.get(cat.value, []):
            if pid in valid and pid not in chosen:
                chosen.append(pid)
        for s in groups[cat]:
            if s.paper_id not in chosen:
                chosen.append(s.paper_id)
        slots[cat] = chosen[: quotas.get(cat, 0)]
        for pid in slots[cat]:
            if pid in rationale_in:
                rationale[pid] = rationale_in[pid]
    refs = ReferenceSet(slots, iteration, rationale)
    refs.check(top_scores, quotas)
    return refs


def single_paper_selection(top_scores: Sequence[PaperScore], iteration: int) -> ReferenceSet:
    best = sorted(top_scores, key=lambda s: (-s.total, s.paper_id))[0]
    return ReferenceSet({best.category: [best.paper_id]}, iteration, via_fallback=True)
