"""Command line entry point: ``refineloop {init,run,score,metrics,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from .embedding import EmbeddingCache, serialize_codebase
from .memory import MemoryStore
from .metrics import framework_metrics
from .orchestrator import RunConfig, apply_ablations, generate_report, make_embedder, make_sources, run
from .corpus import build_pool
from .scoring import embed_pool, score_pool
from .snapshots import CodebaseSnapshot, SnapshotStore
from .synthetic import generate_workload


def _cmd_init(args) -> int:
    root = Path(args.dir)
    root.mkdir(parents=True, exist_ok=True)
    cfg_path = root / "config.yaml"
    if cfg_path.exists() and not args.force:
        print(f"{cfg_path} exists; pass --force to overwrite", file=sys.stderr)
        return 1
    if args.demo:
        wl = generate_workload(root / "demo", seed=args.seed)
        config = {
            "target_codebase_path": str(wl.codebase_dir.relative_to(root)),
            "domain_keywords": wl.domain_keywords,
            "objective": {"metric_name": "ARI", "direction": "maximize"},
            "iteration_budget": 30,
            "seed": args.seed,
            "agent": {"kind": "scripted"},
            "embedder": {"kind": "hash", "dim": 256},
            "executor": {"kind": "simulated", "base_quality": {"ARI": 0.496},
                         "effects": str(wl.effects_path.relative_to(root)), "noise_scale": 0.0},
            "pool": {"target_size": 200, "fixture_path": str(wl.fixture_dir.relative_to(root))},
            "output_dir": "run",
        }
    else:
        config = {
            "target_codebase_path": "path/to/target/model",
            "domain_keywords": ["spatial transcriptomics", "spatial domains"],
            "objective": {"metric_name": "ARI", "direction": "maximize"},
            "iteration_budget": 50,
            "seed": 0,
            "agent": {"kind": "remote", "endpoint": "https://example.invalid/v1/chat/completions",
                      "model": "your-model", "api_key_env": "REFINELOOP_CHAT_API_KEY"},
            "embedder": {"kind": "remote", "endpoint": "https://example.invalid/v1/embeddings",
                         "model": "your-embedder", "dim": 1024, "api_key_env": "REFINELOOP_EMBED_API_KEY"},
            "executor": {"kind": "container", "image": "target-model:latest",
                         "command": "python train.py {outdir}", "timeout": 7200},
            "pool": {"target_size": 200, "live_sources": ["europepmc", "openreview"],
                     "allowlist_path": "venues.txt"},
            "scoring": {"lambda": 0.1, "top_k": 20, "batch_size": 10},
            "output_dir": "run",
        }
        (root / "venues.txt").write_text(
            "[Q1Journal]\nNature Methods\nGenome Biology\nBioinformatics\n\n"
            "[TopAIConference]\nNeurIPS\nICLR\nICML\n", encoding="utf-8")
    cfg_path.write_text(yaml.safe_dump(config, sort_keys=False), encoding="utf-8")
    print(f"wrote {cfg_path}")
    return 0


def _load_config(args) -> RunConfig:
    config = RunConfig.load(Path(args.config))
    if getattr(args, "iterations", None):
        config.iteration_budget = args.iterations
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "ablate", None):
        config.ablations = frozenset(f.strip() for f in args.ablate.split(",") if f.strip())
        RunConfig.__post_init__(config)
    return config


def _cmd_run(args) -> int:
    config = _load_config(args)
    out = Path(args.out) if args.out else None
    store, report = run(config, out)
    print(json.dumps(report.metrics.to_dict(), sort_keys=True))
    return 0


def _cmd_score(args) -> int:
    config = _load_config(args)
    pipe = apply_ablations(config)
    pool = build_pool(config.pool.keywords or config.domain_keywords, make_sources(config), config.pool.target_size)
    cache = EmbeddingCache(make_embedder(config))
    emb = embed_pool(pool, config.domain_keywords, cache.get)
    log = Path(args.log) if args.log else config.resolve(config.output_dir) / "memory.jsonl"
    if log.exists():
        snapshots = SnapshotStore(log.parent / "snapshots")
        store = MemoryStore.load(log, snapshots)
        iteration = store.last_iteration + 1
        ledger = store.refresh_rewards(iteration, pipe.reward_mode)
        anchor_ids = store.anchors() if pipe.memory else (0, 0)
        snaps = [snapshots.get(store.snapshot_id_of(i)) for i in anchor_ids]
        rewards = ledger.rewards
    else:
        base = CodebaseSnapshot.from_directory(config.resolve(config.target_codebase_path))
        snaps, rewards, iteration = [base, base], {}, 1
    vecs = tuple(cache.get(serialize_codebase(s.files, cache.backend.max_chars)) for s in snaps)
    scores = score_pool(emb, vecs, rewards, iteration, config.scoring)
    if args.format == "json":
        for rank, s in enumerate(scores, 1):
            print(json.dumps(dict(s.to_dict(), rank=rank), sort_keys=True))
    else:
        print("paper_id\tS_d\tS_a\tcategory\tR\ttotal\trank")
        for rank, s in enumerate(scores, 1):
            print(f"{s.paper_id}\t{s.domain_sim:.6f}\t{s.arch_sim:.6f}\t{s.category.value}\t"
                  f"{s.reward:.6f}\t{s.total:.6f}\t{rank}")
    return 0


def _cmd_metrics(args) -> int:
    store = MemoryStore.load(Path(args.log))
    m = framework_metrics(store.trajectory(), store.objective)
    print(json.dumps(m.to_dict(), sort_keys=True))
    rows = [("NPG", f"{m.npg:.4f}"), ("NAUI", f"{m.naui:.4f}"), ("SIC", str(m.sic)), ("ESR", f"{m.esr:.3f}")]
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v:>10}")
    return 0


def _cmd_report(args) -> int:
    store = MemoryStore.load(Path(args.log))
    report = generate_report(store)
    md, js = report.write(Path(args.out))
    print(f"wrote {md} and {js}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refineloop", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="scaffold a run configuration")
    p.add_argument("--dir", default=".")
    p.add_argument("--demo", action="store_true", help="generate an offline synthetic workload")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_init)

    p = sub.add_parser("run", help="run the refinement loop")
    p.add_argument("--config", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ablate", help="comma-separated ablation flags")
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("score", help="score the candidate pool against the current memory")
    p.add_argument("--config", required=True)
    p.add_argument("--log", help="memory log (default: <output_dir>/memory.jsonl)")
    p.add_argument("--ablate")
    p.add_argument("--format", choices=("tsv", "json"), default="tsv")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("metrics", help="framework metrics of a memory log")
    p.add_argument("--log", required=True)
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("report", help="write the iteration-wise report for a memory log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
        sys.stdout.flush()
        return code
    except BrokenPipeError:
        # output piped into e.g. head; silence the flush at interpreter exit
        sys.stdout = open(os.devnull, "w")
        return 0


if __name__ == "__main__":
    sys.exit(main())
