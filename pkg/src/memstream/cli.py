"""Command-line entry point: ``memstream {gen,encode,query,eval,memsize}``.

Structured results go to stdout as JSON, diagnostics to stderr. On failure a
JSON object ``{"error": ..., "message": ...}`` is printed and the exit code
is nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .analysis import AnalysisReport, entropy_histogram, recall_at_k, score_trace, self_similarity
from .compression import CompressionStrategy
from .encoder import EncodeTrace, encode_stream
from .errors import MemStreamError
from .kv_store import TieredCacheStore, kv_cache_bytes, load_cache, save_cache
from .manifest import RunConfig, StreamManifest, write_benchmark
from .retrieval import answer_attention, external_scores, internal_scores, question_repr, retrieve
from .tensorio import write_tensor
from .toy_model import ToyModelConfig, gen_benchmark, random_clues

logger = logging.getLogger("memstream")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        "seed": getattr(args, "seed", None),
        "mode": getattr(args, "mode", None),
        "fusion": getattr(args, "fusion", None),
        "rrf_k": getattr(args, "rrf_k", None),
        "budget": getattr(args, "budget", None),
        "window_tokens": getattr(args, "window_tokens", None),
        "window_frames": getattr(args, "window_frames", None),
    }
    data = {**{k: v for k, v in vars(cfg).items()}, **{k: v for k, v in overrides.items() if v is not None}}
    if getattr(args, "strategy", None):
        data["strategy"] = CompressionStrategy.parse(args.strategy)
    return RunConfig(**data)


def _trace_path(cache: Path) -> Path:
    return cache.with_name(cache.name + ".trace.json")


# -- commands -----------------------------------------------------------------------


def cmd_gen(args) -> dict:
    grid = tuple(int(v) for v in args.grid.lower().split("x"))
    config = ToyModelConfig(
        layers=args.layers, heads=args.heads, head_dim=args.head_dim, grid=grid,
        input_dim=args.input_dim, ext_dim=args.ext_dim, seed=args.seed,
    )
    clues = random_clues(args.frames, args.questions, args.clue_size, args.seed) if args.questions else []
    bench = gen_benchmark(args.frames, clues, args.margin, args.redundancy, args.seed, config)
    path = write_benchmark(bench, args.out, video_id=f"toy-seed{args.seed}")
    return {"manifest": str(path), "frames": bench.frame_count, "questions": len(bench.question_ids)}


def cmd_encode(args) -> dict:
    cfg = _run_config(args)
    manifest = StreamManifest.load(args.manifest)
    if manifest.frame_count == 0:
        logger.warning("manifest has no frames; writing an empty cache")
    store = TieredCacheStore(
        manifest.layers, manifest.heads, manifest.head_dim,
        window_tokens=cfg.window_tokens, window_frames=cfg.window_frames,
        spill_dir=cfg.spill_dir, spill_threshold_bytes=cfg.spill_threshold_bytes,
    )
    trace = EncodeTrace()
    with store:
        encode_stream(manifest.frame_inputs(), store, cfg.strategy, trace, workers=cfg.workers)
        cache = Path(args.cache)
        save_cache(store, cache)
        memory = store.memory_report()
    tpath = _trace_path(cache)
    tpath.write_text(json.dumps(trace.to_dict(), sort_keys=True) + "\n")
    for layer, secs in sorted(trace.timings.items()):
        logger.info("layer %d encode time %.3fs", layer, secs)
    return {
        "cache": str(cache),
        "cache_sha256": _sha256(cache),
        "trace": str(tpath),
        "frames": manifest.frame_count,
        "layers": manifest.layers,
        "strategy": cfg.strategy.to_dict(),
        "compression_rate": trace.compression_rate(),
        "memory": memory,
    }


def _load(args, cfg: RunConfig):
    manifest = StreamManifest.load(args.manifest)
    store = load_cache(args.cache, spill_dir=cfg.spill_dir, spill_threshold_bytes=cfg.spill_threshold_bytes)
    if (store.layer_count, store.head_count, store.head_dim) != (manifest.layers, manifest.heads, manifest.head_dim):
        raise MemStreamError("cache and manifest disagree on model sizes")
    if len(store.rep_matrix(0)[0]) != manifest.frame_count:
        raise MemStreamError("cache and manifest disagree on frame count")
    return manifest, store


def _retrieve(manifest, store, cfg, qid, include_rankings=False):
    return retrieve(
        store, manifest.question_features(qid), cfg.mode, cfg.fusion, cfg.budget,
        emb=manifest.external, rrf_k=cfg.rrf_k, weights=cfg.rrf_weights,
        include_rankings=include_rankings,
    )


def cmd_query(args) -> dict:
    cfg = _run_config(args)
    manifest, store = _load(args, cfg)
    qids = args.question or manifest.question_ids
    results = []
    with store:
        for qid in qids:
            res = _retrieve(manifest, store, cfg, qid, include_rankings=args.rankings)
            if qid in manifest.clues:
                res.recall = [recall_at_k(idx, manifest.clues[qid]) for idx in res.layers]
            outputs = answer_attention(manifest.question_features(qid), res, store)
            entry = res.to_dict(include_rankings=args.rankings)
            entry["answer_outputs"] = [
                {"shape": list(o.shape), "sha256": hashlib.sha256(o.tobytes()).hexdigest()} for o in outputs
            ]
            if args.out:
                out = Path(args.out)
                for i, o in enumerate(outputs):
                    write_tensor(out / f"answer_{qid}_layer{i:03d}.mstn", o)
            results.append(entry)
    payload = {"config": cfg.to_dict(), "results": results}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "query.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return payload


def cmd_eval(args) -> dict:
    cfg = _run_config(args)
    manifest, store = _load(args, cfg)
    report = AnalysisReport(config=cfg.to_dict())
    with store:
        for qid in manifest.question_ids:
            clue = manifest.clues.get(qid)
            if clue is None:
                continue
            res = _retrieve(manifest, store, cfg, qid)
            report.question_ids.append(qid)
            report.recalls.append([recall_at_k(idx, clue) for idx in res.layers])
            question = manifest.question_features(qid)
            for i in range(store.layer_count):
                q = question_repr(question.qkv[i][0])
                report.traces.append(score_trace(internal_scores(store, i, q), clue, f"layer:{i}"))
            if manifest.external is not None:
                report.traces.append(score_trace(external_scores(manifest.external, qid), clue, "external"))
        if manifest.frame_count:
            for i in range(store.layer_count):
                report.similarity[i] = self_similarity(store.rep_matrix(i)[1])
    tpath = Path(args.trace) if args.trace else _trace_path(Path(args.cache))
    if tpath.is_file():
        report.entropy = entropy_histogram(EncodeTrace.from_dict(json.loads(tpath.read_text())), cfg.entropy_bins)
    else:
        logger.warning("no encode trace at %s; entropy histogram skipped", tpath)
    paths = report.write(args.out)
    summary = report.summary()
    return {
        "files": {name: str(p) for name, p in sorted(paths.items())},
        "sha256": {name: _sha256(p) for name, p in sorted(paths.items())},
        "mean_recall": summary.get("mean_recall"),
    }


def cmd_memsize(args) -> dict:
    n = kv_cache_bytes(args.L, args.T, args.M, args.H, args.D, args.bytes)
    return {"bytes": n, "human": f"{n / 1e9:.1f} GB", "gib": round(n / 2**30, 3)}


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--manifest", required=True)
    run.add_argument("--cache", required=True)
    run.add_argument("--strategy", help="e.g. full, aks, aks:1/16, pool:2, dilated:4, uniform:8")
    run.add_argument("--mode", choices=["internal", "external", "moe"])
    run.add_argument("--fusion", choices=["rrf", "l2concat"])
    run.add_argument("--rrf-k", type=float)
    run.add_argument("--budget", type=int)
    run.add_argument("--window-tokens", type=int)
    run.add_argument("--window-frames", type=int)

    p = argparse.ArgumentParser(prog="memstream", description="Streaming KV-cache memory engine")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a seeded synthetic benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, default=200)
    g.add_argument("--questions", type=int, default=8)
    g.add_argument("--clue-size", type=int, default=4)
    g.add_argument("--margin", type=float, default=4.0)
    g.add_argument("--redundancy", type=float, default=0.9)
    g.add_argument("--layers", type=int, default=4)
    g.add_argument("--heads", type=int, default=2)
    g.add_argument("--head-dim", type=int, default=32)
    g.add_argument("--grid", default="4x4")
    g.add_argument("--input-dim", type=int, default=64)
    g.add_argument("--ext-dim", type=int, default=64)
    g.set_defaults(func=cmd_gen, seed=0)

    e = sub.add_parser("encode", parents=[common, run], help="encode a stream into a cache file")
    e.set_defaults(func=cmd_encode)

    q = sub.add_parser("query", parents=[common, run], help="retrieve frames for questions")
    q.add_argument("--question", action="append", help="question id (repeatable; default all)")
    q.add_argument("--rankings", action="store_true", help="include per-expert rankings")
    q.add_argument("--out")
    q.set_defaults(func=cmd_query)

    v = sub.add_parser("eval", parents=[common, run], help="recall, traces and diagnostics report")
    v.add_argument("--out", required=True)
    v.add_argument("--trace", help="encode trace JSON (default: <cache>.trace.json)")
    v.set_defaults(func=cmd_eval)

    m = sub.add_parser("memsize", help="full KV-cache size in bytes")
    for name in ("L", "T", "M", "H", "D"):
        m.add_argument(name, type=int)
    m.add_argument("bytes", type=int, nargs="?", default=2)
    m.set_defaults(func=cmd_memsize)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        _emit(args.func(args))
    except (MemStreamError, ValueError, TypeError, OverflowError, OSError, KeyError) as exc:
        logger.error("%s", exc)
        _emit({"error": type(exc).__name__, "message": str(exc)})
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
