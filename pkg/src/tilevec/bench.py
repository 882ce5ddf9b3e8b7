"""Benchmark front end: recall/QPS sweeps, hybrid runs, ablation, cluster sweep.

Two clocks exist everywhere: simulated time (deterministic, used by all
assertions and CSV metrics) and wall-clock (informational only).  Every CSV
gets a sidecar manifest (config hash, seed, corpus checksum) and reruns
byte-identically for simulated metrics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .buffers import FP16, MatrixBuffer, round_up
from .config import EngineConfig
from .corpus import Corpus
from .costmodel import MODE_ORDER, PipelineMode
from .errors import InputError
from .fabric import Fabric
from .index import SearchParams, VectorIndex, align_params
from .pipeline import GemmTask, submit_batched
from .scheduler import (Engine, TemplateName, WorkloadSnapshot, make_template,
                        select_template)

CSV_VERSION = "v1"


@dataclass
class Metrics:
    recall_at_k: float = 0.0
    qps: float = 0.0
    ips: float = 0.0
    build_time_us: float = 0.0
    p50_us: float = 0.0
    p99_us: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.recall_at_k <= 1.0:
            raise InputError(f"recall out of range: {self.recall_at_k}")


def nearest_rank_percentile(values, q: float) -> float:
    """Nearest-rank percentile (q in [0, 100])."""
    if not len(values):
        return 0.0
    s = sorted(values)
    rank = max(1, math.ceil(q / 100.0 * len(s)))
    return float(s[rank - 1])


def recall_at_k(result_lists, gt_ids: np.ndarray, k: int) -> float:
    hits = 0
    for res, truth in zip(result_lists, gt_ids):
        got = {id_ for id_, _ in res[:k]}
        hits += len(got & set(int(t) for t in truth[:k]))
    return hits / (len(result_lists) * k)


def write_csv(path, name: str, header: list[str], rows: list[list],
              manifest: dict):
    lines = [f"# tilevec-csv {name} {CSV_VERSION}", ",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    text = "\n".join(lines) + "\n"
    if path:
        with open(path, "w") as fh:
            fh.write(text)
        with open(f"{path}.manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return text


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def run_manifest(config: EngineConfig, corpus: Corpus | None, **extra) -> dict:
    manifest = {"config_hash": config.fingerprint(), "seed": config.seed,
                "csv_version": CSV_VERSION}
    if corpus is not None:
        manifest["corpus_checksum"] = corpus.checksum
        manifest["corpus_spec"] = corpus.spec
    manifest.update(extra)
    return manifest


# -- bench-query ----------------------------------------------------------------


def bench_query(corpus: Corpus, engine: Engine, n_clusters: int,
                nprobe_list, k: int = 10, batch: int = 256,
                csv_path=None) -> tuple[list[list], str]:
    gt = corpus.ensure_ground_truth(k)
    index = VectorIndex.build(engine, corpus.ids(), corpus.vectors, n_clusters)
    rows = []
    for nprobe in nprobe_list:
        params = SearchParams(k=k, nprobe=nprobe, batch=batch)
        results, latencies, total_us = _search_in_batches(index, corpus.queries,
                                                          params)
        rows.append([nprobe,
                     recall_at_k(results, gt, k),
                     len(corpus.queries) / (total_us * 1e-6),
                     nearest_rank_percentile(latencies, 99.0)])
    text = write_csv(csv_path, "bench_query", ["nprobe", "recall_at_10", "qps", "p99_us"],
                     rows, run_manifest(engine.config, corpus,
                                        n_clusters=index.n_clusters, k=k))
    return rows, text


def _search_in_batches(index: VectorIndex, queries: np.ndarray,
                       params: SearchParams):
    results = []
    latencies = []
    total = 0.0
    template = make_template(TemplateName.QUERY)
    for start in range(0, queries.shape[0], params.batch):
        chunk = queries[start:start + params.batch]
        res, dt = index.search_with_time(chunk, params, template)
        results.extend(res)
        latencies.extend([dt] * len(chunk))
        total += dt
    return results, latencies, total


# -- bench-hybrid -----------------------------------------------------------------


@dataclass
class HybridRun:
    qps: float
    ips: float
    inserted_ids: np.ndarray
    inserted_vectors: np.ndarray
    run_result: object  # scheduler RunResult of the mixed phase


def bench_hybrid(corpus: Corpus, engine: Engine, index: VectorIndex,
                 insert_batch_sizes, n_queries: int = 256,
                 inserts_per_batch_size: int = 128, k: int = 10,
                 query_batch: int = 64, nprobe: int | None = None,
                 seed: int = 11, fifo_policy: bool = False,
                 csv_path=None):
    """Concurrent query + insert streams under the selected template.

    The scan tasks of every query batch and the assignment tasks of every
    insert batch enter one scheduler run together, so class priorities and
    worker pulls genuinely interleave.  Sustained QPS divides queries by the
    time the query stream finishes (planning + last scan + merges); IPS
    divides inserts by the time the insert stream finishes.
    """
    rows = []
    runs = []
    rng = np.random.default_rng(seed)
    next_id = int(corpus.n + 1_000_000)
    for batch_size in insert_batch_sizes:
        run = hybrid_workload(corpus, index, batch_size, n_queries,
                              inserts_per_batch_size, k, query_batch,
                              nprobe, rng, next_id, fifo_policy)
        next_id += len(run.inserted_ids)
        rows.append([batch_size, run.ips, run.qps])
        runs.append(run)
    text = write_csv(csv_path, "bench_hybrid", ["insert_batch", "ips", "qps"],
                     rows, run_manifest(engine.config, corpus, seed=seed,
                                        n_queries=n_queries))
    return rows, text, runs


def hybrid_workload(corpus: Corpus, index: VectorIndex, batch_size: int,
                    n_queries: int, total_inserts: int, k: int,
                    query_batch: int, nprobe: int | None,
                    rng: np.random.Generator, id_base: int,
                    fifo_policy: bool) -> HybridRun:
    engine = index.engine
    template = select_template(WorkloadSnapshot(
        pending_queries=n_queries,
        pending_updates=total_inserts if batch_size else 0))
    queries = corpus.queries[:n_queries]
    params = SearchParams(k=k, nprobe=nprobe or index.n_clusters,
                          batch=query_batch)

    scan_stages = []
    plan_time = 0.0
    for start in range(0, len(queries), query_batch):
        stage = index.prepare_scan(queries[start:start + query_batch], params,
                                   template)
        plan_time += stage.plan_time_us
        scan_stages.append(stage)

    insert_stages = []
    insert_plan_time = 0.0
    inserted = 0
    all_ids, all_vecs = [], []
    while batch_size and inserted < total_inserts:
        take = min(batch_size, total_inserts - inserted)
        vecs = corpus.vectors[rng.choice(corpus.n, size=take, replace=False)]
        ids = np.arange(id_base + inserted, id_base + inserted + take)
        stage = index.prepare_insert(ids, vecs, template)
        insert_plan_time += stage.plan_time_us
        insert_stages.append(stage)
        all_ids.append(ids)
        all_vecs.append(vecs)
        inserted += take

    # The mixed phase: query-class scans and update-class assignments share
    # one global queue.
    mixed = [t for st in scan_stages for *_, t in st.scan_tasks]
    mixed += [st.task for st in insert_stages]
    run = engine.run(mixed, fifo_policy=fifo_policy)

    scan_ids = {t.task_id for st in scan_stages for *_, t in st.scan_tasks}
    last_scan = max((run.completion_us[i] for i in scan_ids), default=0.0)
    last_assign = max((run.completion_us[st.task.task_id]
                       for st in insert_stages), default=0.0)

    merge_time = 0.0
    for stage in scan_stages:
        _, dt = index.finish_scan(stage, run)
        merge_time += dt
    for stage in insert_stages:
        index.finish_insert(stage, run)

    query_stream_us = plan_time + last_scan + merge_time
    insert_stream_us = insert_plan_time + last_assign
    qps = n_queries / (query_stream_us * 1e-6) if n_queries else 0.0
    ips = inserted / (insert_stream_us * 1e-6) if inserted else 0.0
    return HybridRun(
        qps=qps, ips=ips,
        inserted_ids=(np.concatenate(all_ids) if all_ids
                      else np.empty(0, np.int64)),
        inserted_vectors=(np.concatenate(all_vecs) if all_vecs
                          else np.empty((0, corpus.dim), np.float32)),
        run_result=run)


# -- bench-ablation ---------------------------------------------------------------


def ablation_batch(engine: Engine, n_tasks: int = 6, m: int = 256, n: int = 256,
                   k: int = 512, seed: int = 3):
    """A fixed random GEMM batch registered in the engine's fabric."""
    spec = engine.config.tile_spec
    rng = np.random.default_rng(seed)
    tasks = []
    for _ in range(n_tasks):
        a = MatrixBuffer.alloc(round_up(m, spec.m_tile), round_up(k, spec.k_tile),
                               FP16, spec.a_tile, logical_rows=m)
        b = MatrixBuffer.alloc(round_up(k, spec.k_tile), round_up(n, spec.n_tile),
                               FP16, spec.b_tile, logical_cols=n)
        a.data[:] = rng.standard_normal(a.data.size).astype(np.float16)
        b.data[:] = rng.standard_normal(b.data.size).astype(np.float16)
        tasks.append(GemmTask(engine.fabric.register(a),
                              engine.fabric.register(b), m, n))
    flops = 2.0 * n_tasks * round_up(m, spec.m_tile) * round_up(n, spec.n_tile) \
        * round_up(k, spec.k_tile)
    return tasks, flops


def bench_ablation(engine: Engine, csv_path=None) -> tuple[list[list], str]:
    """Model one GEMM batch under all five configurations (E..A)."""
    npu = next(b for b in engine.backends if b.profile.kind.value == "npu")
    tasks, flops = ablation_batch(engine)
    rng = np.random.default_rng(engine.config.seed)
    rows = []
    outputs = {}
    times = {}
    for mode in MODE_ORDER:
        res = submit_batched(tasks, mode, npu.profile.cost, engine.fabric,
                             np.random.default_rng(engine.config.seed),
                             engine.config.staging_capacity_bytes)
        outputs[mode] = res.outputs
        times[mode] = res.sim_time_us
        rows.append([mode.value, flops / (res.sim_time_us * 1e3)])
    base = outputs[MODE_ORDER[0]]
    for mode in MODE_ORDER[1:]:
        for x, y in zip(base, outputs[mode]):
            if not np.array_equal(x, y):
                raise InputError("ablation modes disagree numerically")
    g = {m.value: flops / (times[m] * 1e3) for m in MODE_ORDER}
    if not (g["A"] >= g["B"] >= max(g["C"], g["D"]) >= g["E"]):
        raise InputError(f"ablation ordering violated: {g}")
    rows.sort(key=lambda r: r[0], reverse=True)  # E..A top-down
    text = write_csv(csv_path, "bench_ablation", ["config", "gflops"], rows,
                     run_manifest(engine.config, None))
    return rows, text


# -- bench-clusters ----------------------------------------------------------------


def bench_cluster_sweep(corpus: Corpus, engine_factory, cluster_counts,
                        iterations: int = 3, max_rows: int = 4096,
                        csv_path=None) -> tuple[list[list], str]:
    """Build-time sweep over requested cluster counts.

    Cost is charged on padded GEMM shapes, so requesting C just above a
    multiple of the cluster tile pays for the whole next tile; build time is
    therefore locally minimal at every multiple of the tile width.
    ``engine_factory`` returns a fresh engine per build (isolated fabric).
    """
    vectors = corpus.vectors[:max_rows]
    ids = np.arange(vectors.shape[0], dtype=np.int64)
    rows = []
    for c_req in cluster_counts:
        engine = engine_factory()
        index = VectorIndex.build(engine, ids, vectors, c_req,
                                  iterations=iterations)
        rows.append([c_req, index.n_clusters, index.report.sim_time_us])
    manifest = run_manifest(engine.config, corpus, iterations=iterations,
                            rows=max_rows)
    text = write_csv(csv_path, "bench_clusters",
                     ["requested_clusters", "aligned_clusters", "build_us"],
                     rows, manifest)
    return rows, text
