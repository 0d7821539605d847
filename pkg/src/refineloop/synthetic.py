"""Synthetic offline workload: fixture papers, a toy target codebase and an effect table.

Some papers carry "planted" method topics. The effect table gives those topics
a positive effect on the objective metric, so a simulated run rewards
proposals derived from planted papers.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import yaml

DOMAIN_TERMS = [
    "spatial transcriptomics", "spatial domains", "tissue section", "gene expression", "spot clustering",
    "single-cell", "cell type deconvolution", "histology image", "spatial omics", "tumor microenvironment",
]
OFFDOMAIN_TERMS = [
    "drug response", "protein folding", "molecular property", "traffic forecasting", "speech enhancement",
    "image segmentation", "recommendation", "weather prediction", "materials discovery", "text classification",
]
ARCH_TERMS = [
    "graph attention", "autoencoder", "transformer encoder", "variational inference", "message passing",
    "convolutional layers", "residual connections", "layer normalization", "mixture of experts",
    "diffusion model", "recurrent units", "kernel smoothing",
]
PLANTED_TOPICS = ["contrastive pretraining", "adaptive graph pruning", "multiscale positional encoding"]
VENUES = {
    "Q1Journal": ["Nature Methods", "Genome Biology", "Bioinformatics", "Nature Communications"],
    "TopAIConference": ["NeurIPS", "ICLR", "ICML"],
    "Other": ["Workshop on Applied ML", "Regional Bio Symposium"],
}

TITLE_TEMPLATES = [
    "{m} with {a} for {t}",
    "{t} via {m}",
    "learning {t} through {m} and {a}",
    "a {m} framework for {t}",
]
ABSTRACT_TEMPLATES = [
    "We study {t0} and {t1}. Our model combines {m} and {a} to analyse {t2}. "
    "Experiments show gains on {t0} benchmarks.",
    "Understanding {t0} remains difficult. We present a {m} approach, supported by {a}, "
    "and evaluate it on {t1} and {t2}.",
    "{t0} data are noisy and sparse. Coupling {m} with {a} yields robust estimates for {t1}; "
    "results extend to {t2}.",
]
METHODS_TEMPLATES = [
    "The {m} module is built on {a1} and {a2}. We train with {m} objectives and regularize with {a2}.",
    "Our network applies {m} after {a1} blocks. Optimisation alternates {m} updates with {a2} penalties.",
    "{m} drives representation learning here; {a1} provides structure and {a2} stabilises training.",
    "Architecture: stacked {a1}, then {m}, then {a2}. Loss: {m} term plus reconstruction.",
]

TOY_MODEL = '''"""Toy graph attention autoencoder for spatial domain identification."""

import numpy as np


class GraphAttentionAutoencoder:
    def __init__(self, in_dim, hidden_dim=512, latent_dim=30):
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.latent_dim = latent_dim

    def encode(self, x, adjacency):
        # graph attention layer followed by a dense bottleneck
        return x @ np.ones((self.in_dim, self.latent_dim)) / self.in_dim

    def decode(self, z):
        return z @ np.ones((self.latent_dim, self.in_dim)) / self.latent_dim
'''

TOY_TRAIN = '''"""Training entry point; writes metrics.tsv into the output directory."""

import sys


def main(outdir):
    with open(f"{outdir}/metrics.tsv", "w") as fh:
        fh.write("ARI\\t0.496\\n")


if __name__ == "__main__":
    main(sys.argv[1])
'''


@dataclass
class SyntheticWorkload:
    fixture_dir: Path
    codebase_dir: Path
    effects_path: Path
    planted_ids: list[str]
    domain_keywords: list[str]


def _paper(rng: random.Random, idx: int, planted: Optional[str], eligible: bool) -> dict:
    domain_share = rng.random()
    dom = rng.sample(DOMAIN_TERMS, 3)
    off = rng.sample(OFFDOMAIN_TERMS, 3)
    topic_words = [d if rng.random() < domain_share else o for d, o in zip(dom, off)]
    arch = rng.sample(ARCH_TERMS, 3)
    method = planted or arch[0]
    title = rng.choice(TITLE_TEMPLATES).format(m=method, a=arch[1], t=topic_words[0]).capitalize()
    abstract = rng.choice(ABSTRACT_TEMPLATES).format(m=method, a=arch[1], t0=topic_words[0],
                                                     t1=topic_words[1], t2=topic_words[2])
    methods = rng.choice(METHODS_TEMPLATES).format(m=method, a1=arch[1], a2=arch[2])
    if eligible:
        tier = rng.choice(["Q1Journal", "TopAIConference"])
    else:
        tier = rng.choice(["Q1Journal", "TopAIConference", "Other"])
    venue = rng.choice(VENUES[tier])
    has_full = eligible or rng.random() < 0.5
    code = f"https://github.com/lab{idx}/repo{idx}" if eligible or rng.random() < 0.5 else None
    if not eligible and tier != "Other" and has_full and code:
        code = None
    return {
        "paper_id": f"fixture:{idx:04d}",
        "title": title,
        "abstract": abstract,
        "sections": {"Introduction": abstract, "Methods": methods},
        "venue": venue,
        "venue_tier": tier,
        "has_full_text": has_full,
        "code_url": code,
        "keywords": ["spatial transcriptomics", "graph attention"],
    }


def generate_workload(
    root: Path,
    n_papers: int = 200,
    n_ineligible: int = 20,
    planted_fraction: float = 0.1,
    planted_effect: float = 0.02,
    seed: int = 0,
    topics: Sequence[str] = PLANTED_TOPICS,
) -> SyntheticWorkload:
    """Write fixture papers, a toy codebase and an effects table under ``root``."""
    rng = random.Random(seed)
    root = Path(root)
    fixture_dir = root / "papers"
    codebase_dir = root / "codebase"
    fixture_dir.mkdir(parents=True, exist_ok=True)
    codebase_dir.mkdir(parents=True, exist_ok=True)

    n_planted = round(n_papers * planted_fraction)
    planted_idx = set(rng.sample(range(n_papers), n_planted))
    planted_ids = []
    for i in range(n_papers):
        topic = topics[i % len(topics)] if i in planted_idx else None
        rec = _paper(rng, i, topic, eligible=True)
        if topic:
            planted_ids.append(rec["paper_id"])
        (fixture_dir / f"{rec['paper_id'].replace(':', '_')}.json").write_text(
            json.dumps(rec, indent=1, sort_keys=True), encoding="utf-8")
    for j in range(n_ineligible):
        rec = _paper(rng, n_papers + j, None, eligible=False)
        (fixture_dir / f"{rec['paper_id'].replace(':', '_')}.json").write_text(
            json.dumps(rec, indent=1, sort_keys=True), encoding="utf-8")

    (codebase_dir / "model.py").write_text(TOY_MODEL, encoding="utf-8")
    (codebase_dir / "train.py").write_text(TOY_TRAIN, encoding="utf-8")

    effects_path = root / "effects.yaml"
    effects = [{"keyword": t, "metric": "ARI", "effect": planted_effect} for t in topics]
    effects_path.write_text(yaml.safe_dump(effects, sort_keys=True), encoding="utf-8")
    return SyntheticWorkload(fixture_dir, codebase_dir, effects_path, sorted(planted_ids),
                             ["spatial transcriptomics", "spatial domains", "graph attention"])
