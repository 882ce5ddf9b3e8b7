"""Command-line front end.

Exit codes: 0 success, 2 input error, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import bench as bench_mod
from .backends import DeviceKind, profile_heatmap
from .config import EngineConfig, load_config
from .corpus import SyntheticSpec, ingest
from .costmodel import PipelineMode, save_heatmap
from .errors import InputError, InvariantViolation
from .index import SearchParams, VectorIndex
from .scheduler import Engine


def _add_global_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1,
                   help="CPU worker instances (informational for now)")
    p.add_argument("--mode", default=None, choices=list("ABCDE"),
                   help="pipeline configuration for accelerator batches")
    p.add_argument("--csv-out", default=None)
    p.add_argument("--trace-out", default=None)


def _corpus_args(p: argparse.ArgumentParser):
    p.add_argument("--corpus", required=True,
                   help="synthetic spec (n=...,dim=...) or a file path")
    p.add_argument("--format", default="synthetic",
                   choices=["synthetic", "fvecs", "raw"])
    p.add_argument("--queries", type=int, default=100,
                   help="query count for file-based corpora")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tilevec",
        description="Tile-aligned vector memory engine benchmarks")
    _add_global_flags(p)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("ingest", help="validate and summarize a corpus")
    _corpus_args(sp)

    sp = sub.add_parser("build", help="build an index and save it")
    _corpus_args(sp)
    sp.add_argument("--clusters", type=int, default=128)
    sp.add_argument("--iters", type=int, default=None)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("query", help="search a saved index")
    _corpus_args(sp)
    sp.add_argument("--index", required=True)
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--nprobe", type=int, default=8)
    sp.add_argument("--limit", type=int, default=5, help="queries to print")

    sp = sub.add_parser("insert", help="insert corpus rows into a saved index")
    _corpus_args(sp)
    sp.add_argument("--index", required=True)
    sp.add_argument("--count", type=int, default=32)
    sp.add_argument("--id-base", type=int, default=1 << 40)

    sp = sub.add_parser("bench-query", help="recall/QPS sweep over nprobe")
    _corpus_args(sp)
    sp.add_argument("--clusters", type=int, default=128)
    sp.add_argument("--nprobe-list", default="1,2,4,8,16,32,64,128")
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--batch", type=int, default=256)

    sp = sub.add_parser("bench-hybrid", help="mixed search/insert throughput")
    _corpus_args(sp)
    sp.add_argument("--clusters", type=int, default=128)
    sp.add_argument("--batch-sizes", default="0,32,128")
    sp.add_argument("--n-queries", type=int, default=256)
    sp.add_argument("--inserts", type=int, default=128)

    sp = sub.add_parser("bench-ablation", help="pipeline-mode throughput ladder")

    sp = sub.add_parser("bench-clusters", help="build-time sweep over cluster counts")
    _corpus_args(sp)
    sp.add_argument("--counts", default="64,65,96,127,128,129,192,255,256")
    sp.add_argument("--iters", type=int, default=3)
    sp.add_argument("--rows", type=int, default=4096)

    sp = sub.add_parser("profile", help="regenerate a device heatmap file")
    sp.add_argument("--device", required=True, choices=["cpu", "gpu", "npu"])
    sp.add_argument("--reps", type=int, default=3)
    sp.add_argument("--out", required=True)
    return p


def _engine_from_args(args) -> Engine:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    cfg = load_config(args.config, overrides)
    return Engine(cfg, trace_path=args.trace_out)


def _corpus_from_args(args):
    return ingest(args.corpus, args.format, n_queries=args.queries)


def _run(args) -> int:
    if args.command == "ingest":
        corpus = _corpus_from_args(args)
        print(f"corpus n={corpus.n} dim={corpus.dim} checksum={corpus.checksum[:16]}")
        return 0

    if args.command == "profile":
        engine = _engine_from_args(args)
        backend = next(b for b in engine.backends
                       if b.profile.kind.value == args.device)
        hm = profile_heatmap(backend, reps=args.reps)
        save_heatmap(args.out, args.device, hm)
        print(f"wrote {args.out}")
        return 0

    if args.command == "bench-ablation":
        engine = _engine_from_args(args)
        if args.mode:
            print("note: --mode is ignored; the ablation runs all modes")
        rows, text = bench_mod.bench_ablation(engine, csv_path=args.csv_out)
        print(text, end="")
        return 0

    corpus = _corpus_from_args(args)
    engine = _engine_from_args(args)

    if args.command == "build":
        index = VectorIndex.build(engine, corpus.ids(), corpus.vectors,
                                  args.clusters, iterations=args.iters)
        index.save(args.out)
        print(f"built C={index.n_clusters} n={corpus.n} "
              f"sim_time_us={index.report.sim_time_us:.1f} -> {args.out}")
        return 0

    if args.command == "query":
        index = VectorIndex.load(args.index, engine)
        params = SearchParams(k=args.k, nprobe=args.nprobe)
        results, dt = index.search_with_time(corpus.queries[:args.limit], params)
        for qi, res in enumerate(results):
            pretty = " ".join(f"{id_}:{score:.4f}" for id_, score in res)
            print(f"query {qi}: {pretty}")
        print(f"sim_time_us={dt:.1f}")
        return 0

    if args.command == "insert":
        index = VectorIndex.load(args.index, engine)
        rng = np.random.default_rng(engine.config.seed)
        rows = corpus.vectors[rng.choice(corpus.n, size=args.count, replace=False)]
        ids = np.arange(args.id_base, args.id_base + args.count)
        dt = index.insert(ids, rows)
        index.save(args.index)
        print(f"inserted {args.count} sim_time_us={dt:.1f}")
        return 0

    if args.command == "bench-query":
        nprobes = [int(v) for v in args.nprobe_list.split(",")]
        _, text = bench_mod.bench_query(corpus, engine, args.clusters, nprobes,
                                        k=args.k, batch=args.batch,
                                        csv_path=args.csv_out)
        print(text, end="")
        return 0

    if args.command == "bench-hybrid":
        sizes = [int(v) for v in args.batch_sizes.split(",")]
        index = VectorIndex.build(engine, corpus.ids(), corpus.vectors,
                                  args.clusters)
        _, text, _ = bench_mod.bench_hybrid(
            corpus, engine, index, sizes, n_queries=args.n_queries,
            inserts_per_batch_size=args.inserts, csv_path=args.csv_out)
        print(text, end="")
        return 0

    if args.command == "bench-clusters":
        counts = [int(v) for v in args.counts.split(",")]
        seed = engine.config.seed

        def factory():
            cfg = load_config(args.config, {"seed": str(seed)})
            return Engine(cfg)

        _, text = bench_mod.bench_cluster_sweep(corpus, factory, counts,
                                                iterations=args.iters,
                                                max_rows=args.rows,
                                                csv_path=args.csv_out)
        print(text, end="")
        return 0

    raise InputError(f"unknown command {args.command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
