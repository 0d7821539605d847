"""Hybrid paper scoring and ranking.

A paper's total score is its embedding similarity plus a small reward term::

    total     = embedding + lambda * reward
    embedding = w_d * domain + w_a * architecture      (weights depend on H/M/L)
    domain    = cos(E_domain_keywords, E_abstract)
    architecture = m1 * cos(E_code_best, E_methods) + m2 * cos(E_code_second, E_methods)

Papers are put into H/M/L tiers by descending domain similarity (terciles).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .corpus import CandidatePool
from .embedding import cosine
from .errors import QuotaUnsatisfiable, RefineLoopError

logger = logging.getLogger(__name__)


class DomainCategory(str, Enum):
    H = "H"
    M = "M"
    L = "L"


CATEGORY_ORDER = (DomainCategory.H, DomainCategory.M, DomainCategory.L)


@dataclass(frozen=True)
class WeightProfile:
    w_d: float
    w_a: float

    def __post_init__(self):
        if abs(self.w_d + self.w_a - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {self.w_d} + {self.w_a}")


DEFAULT_PROFILES = {
    DomainCategory.H: WeightProfile(0.9, 0.1),
    DomainCategory.M: WeightProfile(0.5, 0.5),
    DomainCategory.L: WeightProfile(0.1, 0.9),
}

DEFAULT_QUOTAS = {DomainCategory.H: 2, DomainCategory.M: 1, DomainCategory.L: 2}


@dataclass
class ScoringConfig:
    reward_weight: float = 0.1
    momentum_best: float = 0.9
    momentum_second: float = 0.1
    weight_profiles: dict = field(default_factory=lambda: dict(DEFAULT_PROFILES))
    top_k: int = 20
    batch_size: int = 10
    quotas: dict = field(default_factory=lambda: dict(DEFAULT_QUOTAS))
    strict_quotas: bool = False

    def __post_init__(self):
        if self.reward_weight < 0:
            raise ValueError("reward_weight (lambda) must be >= 0")
        if abs(self.momentum_best + self.momentum_second - 1.0) > 1e-12:
            raise ValueError("momentum coefficients must sum to 1")
        self.weight_profiles = {DomainCategory(k): (v if isinstance(v, WeightProfile) else WeightProfile(*v))
                                for k, v in self.weight_profiles.items()}
        self.quotas = {DomainCategory(k): int(v) for k, v in self.quotas.items()}
        for cat in CATEGORY_ORDER:
            self.quotas.setdefault(cat, 0)
        if self.top_k < max(5, sum(self.quotas.values())):
            raise ValueError("top_k must admit the per-category selection quotas")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class PaperScore:
    paper_id: str
    domain_sim: float
    arch_sim: float
    embedding_sim: float
    reward: float
    total: float
    category: DomainCategory
    iteration: int

    def to_dict(self) -> dict:
        return {
            "paper_id": self.paper_id,
            "S_d": self.domain_sim,
            "S_a": self.arch_sim,
            "S_e": self.embedding_sim,
            "R": self.reward,
            "total": self.total,
            "category": self.category.value,
            "iteration": self.iteration,
        }


def domain_similarity(domain_keywords_embedding, abstract_embedding) -> float:
    return cosine(domain_keywords_embedding, abstract_embedding)


def architecture_similarity(best_code_embedding, second_code_embedding, methods_embedding,
                            cfg: Optional[ScoringConfig] = None) -> float:
    cfg = cfg or ScoringConfig()
    return (cfg.momentum_best * cosine(best_code_embedding, methods_embedding)
            + cfg.momentum_second * cosine(second_code_embedding, methods_embedding))


def weight_profile(category: DomainCategory, cfg: Optional[ScoringConfig] = None) -> WeightProfile:
    cfg = cfg or ScoringConfig()
    return cfg.weight_profiles[DomainCategory(category)]


def embedding_similarity(category: DomainCategory, s_d: float, s_a: float,
                         cfg: Optional[ScoringConfig] = None) -> float:
    w = weight_profile(category, cfg)
    return w.w_d * s_d + w.w_a * s_a


def total_score(s_e: float, reward: float, cfg: Optional[ScoringConfig] = None) -> float:
    cfg = cfg or ScoringConfig()
    return s_e + cfg.reward_weight * reward


def categorize(paper_ids: Sequence[str], domain_sims: Mapping[str, float]) -> dict[str, DomainCategory]:
    """Tercile split by descending domain similarity; remainder goes to H first, then M.

    Ties are broken by paper_id so the lexicographically smaller id lands in
    the higher tier.
    """
    ordered = sorted(paper_ids, key=lambda pid: (-domain_sims[pid], pid))
    n = len(ordered)
    base, rem = divmod(n, 3)
    n_h = base + (1 if rem > 0 else 0)
    n_m = base + (1 if rem > 1 else 0)
    out = {}
    for i, pid in enumerate(ordered):
        if i < n_h:
            out[pid] = DomainCategory.H
        elif i < n_h + n_m:
            out[pid] = DomainCategory.M
        else:
            out[pid] = DomainCategory.L
    return out


def sort_scores(scores: Sequence[PaperScore]) -> list[PaperScore]:
    return sorted(scores, key=lambda s: (-s.total, s.paper_id))


@dataclass
class PoolEmbeddings:
    """Per-paper abstract and methods vectors, plus the domain keyword vector."""

    domain: np.ndarray
    abstracts: dict[str, np.ndarray]
    methods: dict[str, np.ndarray]


def embed_pool(pool: CandidatePool, domain_keywords: Sequence[str], embed_fn: Callable[[str], np.ndarray]) -> PoolEmbeddings:
    """Embed every pool member; papers whose embedding fails are left out with a warning."""
    domain = embed_fn(", ".join(domain_keywords))
    abstracts, methods = {}, {}
    for paper in pool.papers:
        try:
            ab = embed_fn(paper.abstract)
            me = embed_fn(paper.methods_text)
        except RefineLoopError as exc:
            logger.warning("dropping %s from ranking: %s", paper.paper_id, exc)
            continue
        abstracts[paper.paper_id] = ab
        methods[paper.paper_id] = me
    return PoolEmbeddings(domain, abstracts, methods)


def score_pool(
    embeddings: PoolEmbeddings,
    anchors: tuple,
    rewards: Mapping[str, float],
    iteration: int,
    cfg: Optional[ScoringConfig] = None,
) -> list[PaperScore]:
    """Score every embedded paper against the (best, second) code anchors.

    ``rewards`` maps paper_id to its current batch reward (missing ids score 0).
    Returns scores sorted by total, descending, ties by paper_id.
    """
    cfg = cfg or ScoringConfig()
    best_vec, second_vec = anchors
    s_d, s_a = {}, {}
    for pid in embeddings.abstracts:
        try:
            s_d[pid] = domain_similarity(embeddings.domain, embeddings.abstracts[pid])
            s_a[pid] = architecture_similarity(best_vec, second_vec, embeddings.methods[pid], cfg)
        except RefineLoopError as exc:
            logger.warning("dropping %s from ranking: %s", pid, exc)
            s_d.pop(pid, None)
    cats = categorize(list(s_d), s_d)
    scores = []
    for pid, d in s_d.items():
        cat = cats[pid]
        r = float(rewards.get(pid, 0.0))
        e = embedding_similarity(cat, d, s_a[pid], cfg)
        scores.append(PaperScore(pid, d, s_a[pid], e, r, total_score(e, r, cfg), cat, iteration))
    return sort_scores(scores)


def rank_top(scores: Sequence[PaperScore], cfg: Optional[ScoringConfig] = None, presorted: bool = False) -> list[PaperScore]:
    """Top ``cfg.top_k`` by total, amended so each category meets its quota.

    Deficient categories are backfilled with their best members from outside
    the top-k, displacing the lowest-ranked members of categories that hold
    more than their quota. With ``presorted`` the given order is used as the
    ranking (e.g. a seeded random order) instead of sorting by total.
    """
    cfg = cfg or ScoringConfig()
    ordered = list(scores) if presorted else sort_scores(scores)
    k = min(cfg.top_k, len(ordered))
    top = ordered[:k]
    rest = ordered[k:]
    position = {s.paper_id: i for i, s in enumerate(ordered)}

    counts = {c: 0 for c in CATEGORY_ORDER}
    for s in top:
        counts[s.category] += 1
    available = {c: counts[c] + sum(1 for s in rest if s.category is c) for c in CATEGORY_ORDER}
    for cat in CATEGORY_ORDER:
        if available[cat] < cfg.quotas[cat]:
            msg = f"category {cat.value} has {available[cat]} members, quota {cfg.quotas[cat]}"
            if cfg.strict_quotas:
                raise QuotaUnsatisfiable(msg)
            logger.warning(msg)

    for cat in CATEGORY_ORDER:
        need = min(cfg.quotas[cat], available[cat]) - counts[cat]
        if need <= 0:
            continue
        incoming = [s for s in rest if s.category is cat][:need]
        for new in incoming:
            victim_idx = None
            for i in range(len(top) - 1, -1, -1):
                c = top[i].category
                if counts[c] > cfg.quotas[c]:
                    victim_idx = i
                    break
            if victim_idx is None:
                break
            victim = top.pop(victim_idx)
            counts[victim.category] -= 1
            rest.append(victim)
            rest.remove(new)
            top.append(new)
            counts[cat] += 1
        rest.sort(key=lambda s: position[s.paper_id])
        top.sort(key=lambda s: position[s.paper_id])
    return top
