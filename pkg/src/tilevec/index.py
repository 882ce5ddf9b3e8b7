"""Tile-aligned IVF index.

Cluster count, embedding dimension, and row counts are aligned to the GEMM
tile grid so every matrix op issued by build, insert, and rebuild fully
occupies accelerator tiles: C is a multiple of n_tile, the embedding
dimension pads to k_tile (zero padding leaves inner products unchanged),
and row batches pad to m_tile.

Scoring is inner product over caller-normalized vectors with fp16 operands
and fp32 accumulation; L2 ranking uses the norm identity
``d2 = |x|^2 + |c|^2 - 2 x.c`` so centroid probing needs only cached
centroid norms.  Deletions tombstone ids and reclaim space at rebuild.

Concurrency: searches read one atomic state snapshot; inserts and removes
serialize through a writer lock and become visible through size counters
bumped last; rebuild builds a shadow state and swaps the reference.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .adaptation import PackDescriptor, pack_fp16_tile_major
from .buffers import (FP16, FP32, MatrixBuffer, TileSpec, round_up)
from .config import EngineConfig
from .errors import (DuplicateIdError, InputError, PersistenceError,
                     ShapeError)
from .fp16 import fp16_array_to_fp32, fp32_array_to_fp16
from .pipeline import GemmTask
from .scheduler import (Engine, GemmWork, HostWork, Task, TaskKind, Template,
                        TemplateName, TransformWork, make_template, merge_topk)

MAGIC = b"TVIX"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class EmbeddingRecord:
    """A stored vector with its stable 64-bit id."""

    id: int
    vector: np.ndarray


@dataclass(frozen=True)
class SearchParams:
    k: int = 10
    nprobe: int = 8
    batch: int = 256

    def validate(self, n_clusters: int):
        if self.k < 1:
            raise InputError(f"k must be >= 1, got {self.k}")
        if not 1 <= self.nprobe <= n_clusters:
            raise InputError(
                f"nprobe must be in [1, {n_clusters}], got {self.nprobe}")


@dataclass
class ScanStage:
    """Planned posting scans for one query batch (tasks not yet run)."""

    state: "IndexState"
    params: SearchParams
    template: Template
    n_queries: int
    scan_tasks: list
    packed_handles: dict
    plan_time_us: float


@dataclass
class InsertStage:
    """A packed insert batch awaiting its assignment GEMM."""

    state: "IndexState"
    ids: np.ndarray
    padded: np.ndarray
    task: Task
    pack_handle: int
    plan_time_us: float


def align_params(requested_clusters: int, dim: int, n_rows: int,
                 tile_spec: TileSpec | None = None) -> tuple[int, int, int]:
    """Round (clusters, dim, rows) up to tile multiples (N, K, M)."""
    if min(requested_clusters, dim, n_rows) < 1:
        raise InputError("alignment inputs must be >= 1")
    t = tile_spec or TileSpec()
    return (round_up(requested_clusters, t.n_tile),
            round_up(dim, t.k_tile),
            round_up(n_rows, t.m_tile))


class PostingStore:
    """Ids plus packed vectors of one cluster.

    Vectors live as the columns of a (dim_padded x capacity) fp16 tile-major
    matrix, directly consumable as a GEMM right-hand operand.  Capacity grows
    in whole tile columns; columns beyond ``size`` stay zero.  Appends write
    payload first and bump ``size`` last so lock-free readers always observe
    a consistent prefix (read ``size`` before grabbing the buffer).
    """

    def __init__(self, dim_padded: int, tile_spec: TileSpec):
        self.tile_spec = tile_spec
        self.dim_padded = dim_padded
        self.size = 0
        self.capacity = 0
        self.ids = np.empty(0, dtype=np.int64)
        self.buffer: MatrixBuffer | None = None
        self.handle: int | None = None

    def _grow(self, min_capacity: int):
        nt = self.tile_spec.n_tile
        new_cap = round_up(max(min_capacity, self.capacity + nt), nt)
        buf = MatrixBuffer.alloc(self.dim_padded, new_cap, FP16,
                                 self.tile_spec.b_tile, logical_cols=self.size)
        if self.buffer is not None:
            old_gc = self.capacity // nt
            buf.tile_view()[:, :old_gc] = self.buffer.tile_view()
        new_ids = np.zeros(new_cap, dtype=np.int64)
        new_ids[:self.size] = self.ids[:self.size]
        self.ids = new_ids
        self.buffer = buf
        self.capacity = new_cap
        self.handle = None  # re-register lazily after growth

    def append(self, id_: int, vec16: np.ndarray):
        if self.size == self.capacity:
            self._grow(self.size + 1)
        j = self.size
        nt = self.tile_spec.n_tile
        gk = self.dim_padded // self.tile_spec.k_tile
        tv = self.buffer.tile_view()
        tv[:, j // nt, :, j % nt] = vec16.reshape(gk, self.tile_spec.k_tile)
        self.ids[j] = id_
        self.buffer.logical_cols = j + 1
        self.size = j + 1

    def bulk_load(self, ids: np.ndarray, vectors16: np.ndarray):
        """Replace contents with (size x dim_padded) fp16 vectors."""
        s = len(ids)
        if s == 0:
            return
        self._grow(s)
        nt = self.tile_spec.n_tile
        kt = self.tile_spec.k_tile
        padded = np.zeros((self.dim_padded, self.capacity), dtype=np.float16)
        padded[:, :s] = vectors16.T
        gk, gc = self.buffer.tile_grid()
        self.buffer.tile_view()[...] = padded.reshape(gk, kt, gc, nt).transpose(0, 2, 1, 3)
        self.ids[:s] = ids
        self.buffer.logical_cols = s
        self.size = s

    def vectors16(self, count: int | None = None) -> np.ndarray:
        """(size x dim_padded) fp16 matrix of the stored vectors."""
        n = self.size if count is None else count
        if n == 0:
            return np.empty((0, self.dim_padded), dtype=np.float16)
        tv = self.buffer.tile_view()
        full = tv.transpose(0, 2, 1, 3).reshape(self.dim_padded, self.capacity)
        return full[:, :n].T.copy()

    def ensure_registered(self, fabric) -> int:
        if self.handle is None:
            self.handle = fabric.register(self.buffer)
        return self.handle


@dataclass
class IndexState:
    dim: int
    dim_padded: int
    n_clusters: int
    tile_spec: TileSpec
    centroids: np.ndarray          # (C, dim_padded) fp32 master copy
    centroid_norms: np.ndarray     # (C,) fp32, |c|^2
    centroid_pack: MatrixBuffer    # (dim_padded x C) fp16 B operand
    centroid_handle: int
    postings: list
    id_to_loc: dict
    tombstones: frozenset = frozenset()
    tombstone_array: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    nprobe_default: int = 8

    def live_count(self) -> int:
        return len(self.id_to_loc) - len(self.tombstones)


@dataclass
class BuildReport:
    iterations: int
    objective_history: list
    sim_time_us: float
    gemm_count: int


def _centroid_norms(centroids: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", centroids, centroids, dtype=np.float32)


def _kmeans_plus_plus(x: np.ndarray, n_clusters: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ over fp64 host arithmetic (deterministic)."""
    n = x.shape[0]
    x64 = x.astype(np.float64)
    sq = np.einsum("ij,ij->i", x64, x64)
    centers = np.empty((n_clusters, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = x64[first]
    d2 = sq + sq[first] - 2.0 * (x64 @ x64[first])
    np.maximum(d2, 0.0, out=d2)
    for c in range(1, n_clusters):
        total = float(d2.sum())
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=d2 / total))
        centers[c] = x64[pick]
        cand = sq + sq[pick] - 2.0 * (x64 @ x64[pick])
        np.maximum(cand, 0.0, out=cand)
        np.minimum(d2, cand, out=d2)
    return centers.astype(np.float32)


class VectorIndex:
    """IVF index driven through the task scheduler."""

    def __init__(self, engine: Engine, state: IndexState,
                 report: BuildReport | None = None):
        self.engine = engine
        self._state = state
        self.report = report
        self._write_lock = threading.RLock()
        self._rebuild_count = 0

    @property
    def state(self) -> IndexState:
        return self._state

    @property
    def n_clusters(self) -> int:
        return self._state.n_clusters

    def live_count(self) -> int:
        return self._state.live_count()

    # -- build ----------------------------------------------------------------

    @classmethod
    def build(cls, engine: Engine, ids, vectors, n_clusters_requested: int,
              iterations: int | None = None, seed: int | None = None,
              template: Template | None = None,
              early_stop: bool = True) -> "VectorIndex":
        cfg = engine.config
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        x = np.ascontiguousarray(vectors, dtype=np.float32)
        if x.ndim != 2 or len(ids) != x.shape[0]:
            raise ShapeError("vectors must be (n, dim) with one id per row")
        if len(np.unique(ids)) != len(ids):
            raise DuplicateIdError("duplicate ids in build input")
        n, dim = x.shape
        tile = cfg.tile_spec
        n_clusters, dim_padded, _ = align_params(n_clusters_requested, dim, n, tile)
        if n < n_clusters:
            raise InputError(
                f"need at least {n_clusters} records after alignment, got {n}")

        template = template or make_template(TemplateName.INDEX)
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        iters = cfg.kmeans_iterations if iterations is None else iterations

        xp = np.zeros((n, dim_padded), dtype=np.float32)
        xp[:, :dim] = x
        x16 = fp32_array_to_fp16(xp)
        x16n = np.einsum("ij,ij->i", x16.astype(np.float32),
                         x16.astype(np.float32), dtype=np.float32)

        centroids = _kmeans_plus_plus(xp, n_clusters, rng)

        sim_time = 0.0
        gemm_count_before = len(engine.gemm_shapes())

        # Pack the dataset once; it is reused by every assignment pass.
        a_pack = {}

        def do_pack():
            buf = pack_fp16_tile_major(
                PackDescriptor(MatrixBuffer.from_array(xp), tile, operand="a"))
            a_pack["handle"] = engine.fabric.register(buf)
            a_pack["buffer"] = buf
            return a_pack["handle"]

        run = engine.run([engine.new_task(
            TaskKind.PACK, TransformWork(do_pack, nbytes=xp.nbytes + xp.nbytes // 2),
            template, payload_bytes=xp.nbytes)])
        sim_time += run.makespan_us

        labels = np.zeros(n, dtype=np.int64)
        objective_history = []
        prev_obj = None
        done_iters = 0
        for _ in range(max(iters, 1)):
            scores, dt = _assignment_scores(
                engine, template, a_pack["handle"], a_pack["buffer"],
                centroids, n, cfg)
            sim_time += dt
            labels = _labels_from_scores(scores, _centroid_norms(centroids))
            centroids, labels = _update_centroids(xp, labels, n_clusters, rng)
            obj = _objective(xp, centroids, labels)
            objective_history.append(obj)
            done_iters += 1
            if early_stop and prev_obj is not None and prev_obj > 0:
                if (prev_obj - obj) / prev_obj < cfg.kmeans_tolerance:
                    break
            prev_obj = obj

        state = _assemble_state(engine, cfg, dim, dim_padded, n_clusters,
                                centroids, ids, x16, labels)
        report = BuildReport(done_iters, objective_history, sim_time,
                             len(engine.gemm_shapes()) - gemm_count_before)
        return cls(engine, state, report)

    # -- search ---------------------------------------------------------------

    def search(self, queries, params: SearchParams,
               template: Template | None = None):
        results, _ = self.search_with_time(queries, params, template)
        return results

    def search_with_time(self, queries, params: SearchParams,
                         template: Template | None = None):
        template = template or make_template(TemplateName.QUERY)
        stage = self.prepare_scan(queries, params, template)
        sim_time = stage.plan_time_us
        tasks = [t for *_, t in stage.scan_tasks]
        if tasks:
            run = self.engine.run(tasks)
            sim_time += run.makespan_us
        else:
            run = None
        results, merge_time = self.finish_scan(stage, run)
        return results, sim_time + merge_time

    def prepare_scan(self, queries, params: SearchParams,
                     template: Template) -> "ScanStage":
        """Query-side planning: pack queries, rank centroids, choose probes,
        pack per-cluster query subsets, and build the scan tasks (not run)."""
        state = self._state
        params.validate(state.n_clusters)
        if state.live_count() == 0:
            raise InputError("search on an empty index")
        q = np.ascontiguousarray(queries, dtype=np.float32)
        if q.ndim == 1:
            q = q[None, :]
        if q.shape[1] != state.dim:
            raise ShapeError(f"query dim {q.shape[1]} != index dim {state.dim}")

        qp = np.zeros((q.shape[0], state.dim_padded), dtype=np.float32)
        qp[:, :state.dim] = q
        sim_time = 0.0

        pack_out = {}

        def pack_queries():
            buf = pack_fp16_tile_major(PackDescriptor(
                MatrixBuffer.from_array(qp), state.tile_spec, operand="a"))
            pack_out["handle"] = self.engine.fabric.register(buf)
            return pack_out["handle"]

        run = self.engine.run([self.engine.new_task(
            TaskKind.PACK, TransformWork(pack_queries, nbytes=qp.nbytes * 1.5),
            template, payload_bytes=qp.nbytes)])
        sim_time += run.makespan_us

        gemm = GemmWork((GemmTask(pack_out["handle"], state.centroid_handle,
                                  q.shape[0], state.n_clusters),))
        task = self.engine.new_task(
            TaskKind.CENTROID_GEMM, gemm, template,
            m_hint=round_up(q.shape[0], state.tile_spec.m_tile),
            k_hint=state.dim_padded,
            estimated_flops=2.0 * q.shape[0] * state.n_clusters * state.dim_padded)
        run = self.engine.run([task])
        sim_time += run.makespan_us
        centroid_scores = run.results[task.task_id][0]
        self.engine.fabric.unmap(pack_out["handle"])

        probes = _probe_clusters(centroid_scores, state.centroid_norms,
                                 params.nprobe)
        by_cluster = {}
        for qi in range(qp.shape[0]):
            for c in probes[qi]:
                by_cluster.setdefault(int(c), []).append(qi)

        scan_jobs = []
        pack_tasks = []
        packed = {}
        for c, rows in sorted(by_cluster.items()):
            store = state.postings[c]
            count = store.size  # capture before grabbing the buffer
            if count == 0:
                continue
            sub = np.ascontiguousarray(qp[rows])

            def pack_sub(sub=sub, c=c):
                buf = pack_fp16_tile_major(PackDescriptor(
                    MatrixBuffer.from_array(sub), state.tile_spec, operand="a"))
                packed[c] = self.engine.fabric.register(buf)
                return packed[c]

            pack_tasks.append(self.engine.new_task(
                TaskKind.PACK, TransformWork(pack_sub, nbytes=sub.nbytes * 1.5),
                template, payload_bytes=sub.nbytes))
            scan_jobs.append((c, rows, count, store))
        if pack_tasks:
            run = self.engine.run(pack_tasks)
            sim_time += run.makespan_us

        scan_tasks = []
        for c, rows, count, store in scan_jobs:
            handle = store.ensure_registered(self.engine.fabric)
            gemm = GemmWork((GemmTask(packed[c], handle, len(rows), count),))
            scan_tasks.append((c, rows, count, store, self.engine.new_task(
                TaskKind.POSTING_SCAN, gemm, template,
                m_hint=round_up(len(rows), state.tile_spec.m_tile),
                k_hint=state.dim_padded,
                estimated_flops=2.0 * len(rows) * count * state.dim_padded)))
        return ScanStage(state=state, params=params, template=template,
                         n_queries=qp.shape[0], scan_tasks=scan_tasks,
                         packed_handles=packed, plan_time_us=sim_time)

    def finish_scan(self, stage: "ScanStage", run):
        """Fold scan results into per-query partials and merge on the host."""
        state = stage.state
        partials = [[] for _ in range(stage.n_queries)]
        for c, rows, count, store, task in stage.scan_tasks:
            scores = run.results[task.task_id][0]
            ids = store.ids[:count]
            live = (~np.isin(ids, state.tombstone_array)
                    if state.tombstone_array.size else
                    np.ones(count, dtype=bool))
            if not live.any():
                continue
            live_ids = ids[live]
            for row_pos, qi in enumerate(rows):
                row = scores[row_pos][live]
                top = min(stage.params.k, row.size)
                order = np.lexsort((live_ids, -row))[:top]
                partials[qi].append(
                    [(int(live_ids[o]), float(row[o])) for o in order])
        for c in stage.packed_handles:
            self.engine.fabric.unmap(stage.packed_handles[c])

        merge_tasks = []
        for qi in range(stage.n_queries):
            plists = partials[qi]
            merge_tasks.append(self.engine.new_task(
                TaskKind.TOPK_MERGE,
                HostWork((lambda pl=plists: merge_topk(pl, stage.params.k)),
                         cost_us=1.0 + 0.01 * sum(len(p) for p in plists)),
                stage.template))
        merge_run = self.engine.run(merge_tasks)
        return ([merge_run.results[t.task_id] for t in merge_tasks],
                merge_run.makespan_us)

    # -- updates ---------------------------------------------------------------

    def insert(self, ids, vectors, template: Template | None = None) -> float:
        """Assign and append a batch; returns simulated time in us."""
        template = template or make_template(TemplateName.UPDATE)
        stage = self.prepare_insert(ids, vectors, template)
        run = self.engine.run([stage.task])
        self.finish_insert(stage, run)
        return stage.plan_time_us + run.makespan_us

    def prepare_insert(self, ids, vectors, template: Template) -> "InsertStage":
        """Validate and pack an insert batch; returns the assignment task."""
        state = self._state
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        x = np.ascontiguousarray(vectors, dtype=np.float32)
        if x.ndim != 2 or x.shape[0] != len(ids):
            raise ShapeError("vectors must be (n, dim) with one id per row")
        if x.shape[1] != state.dim:
            raise ShapeError(f"dim {x.shape[1]} != index dim {state.dim}")
        if len(np.unique(ids)) != len(ids):
            raise DuplicateIdError("duplicate ids within insert batch")
        with self._write_lock:
            for id_ in ids:
                if int(id_) in state.id_to_loc:
                    raise DuplicateIdError(f"id {int(id_)} already present")

        xp = np.zeros((x.shape[0], state.dim_padded), dtype=np.float32)
        xp[:, :state.dim] = x
        out = {}

        def pack_batch():
            buf = pack_fp16_tile_major(PackDescriptor(
                MatrixBuffer.from_array(xp), state.tile_spec, operand="a"))
            out["handle"] = self.engine.fabric.register(buf)
            return out["handle"]

        run = self.engine.run([self.engine.new_task(
            TaskKind.PACK, TransformWork(pack_batch, nbytes=xp.nbytes * 1.5),
            template, payload_bytes=xp.nbytes)])

        gemm = GemmWork((GemmTask(out["handle"], state.centroid_handle,
                                  x.shape[0], state.n_clusters),))
        task = self.engine.new_task(
            TaskKind.ASSIGNMENT_GEMM, gemm, template,
            m_hint=round_up(x.shape[0], state.tile_spec.m_tile),
            k_hint=state.dim_padded,
            estimated_flops=2.0 * x.shape[0] * state.n_clusters * state.dim_padded)
        return InsertStage(state=state, ids=ids, padded=xp, task=task,
                           pack_handle=out["handle"],
                           plan_time_us=run.makespan_us)

    def finish_insert(self, stage: "InsertStage", run):
        """Apply assignment results: append postings, publish visibility."""
        with self._write_lock:
            state = stage.state
            scores = run.results[stage.task.task_id][0]
            self.engine.fabric.unmap(stage.pack_handle)
            labels = _labels_from_scores(scores, state.centroid_norms)
            x16 = fp32_array_to_fp16(stage.padded)
            for i, id_ in enumerate(stage.ids):
                c = int(labels[i])
                store = state.postings[c]
                store.append(int(id_), x16[i])
                state.id_to_loc[int(id_)] = (c, store.size - 1)

    def remove(self, ids) -> int:
        """Tombstone ids; returns how many were live.  Space is reclaimed at
        the next rebuild (automatic past the configured tombstone ratio)."""
        with self._write_lock:
            state = self._state
            removed = 0
            tomb = set(state.tombstones)
            for id_ in np.ascontiguousarray(ids, dtype=np.int64):
                key = int(id_)
                if key in state.id_to_loc and key not in tomb:
                    tomb.add(key)
                    removed += 1
            state.tombstones = frozenset(tomb)
            state.tombstone_array = np.fromiter(sorted(tomb), dtype=np.int64,
                                                count=len(tomb))
            ratio = self.engine.config.rebuild_tombstone_ratio
            live = state.live_count()
            if (ratio is not None and live > 0
                    and len(tomb) >= ratio * live and removed):
                self.rebuild()
            return removed

    def rebuild(self) -> float:
        """Drop tombstones and rebuild from live records; readers keep the
        old snapshot until the atomic swap."""
        with self._write_lock:
            old = self._state
            ids, vecs16 = _live_records(old)
            if len(ids) == 0:
                raise InputError("cannot rebuild an empty index")
            self._rebuild_count += 1
            vectors = fp16_array_to_fp32(vecs16)[:, :old.dim]
            rebuilt = VectorIndex.build(
                self.engine, ids, vectors, old.n_clusters,
                seed=self.engine.config.seed + self._rebuild_count,
                template=make_template(TemplateName.INDEX))
            new_state = rebuilt._state
            new_state.nprobe_default = old.nprobe_default
            self._state = new_state
            self.report = rebuilt.report
            return rebuilt.report.sim_time_us

    # -- persistence ------------------------------------------------------------

    def save(self, path):
        state = self._state
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IIIIIIIIQ", FORMAT_VERSION, state.dim,
                                 state.dim_padded, state.n_clusters,
                                 state.tile_spec.m_tile, state.tile_spec.n_tile,
                                 state.tile_spec.k_tile, state.nprobe_default,
                                 len(state.tombstones)))
            fh.write(np.ascontiguousarray(state.centroids, dtype="<f4").tobytes())
            for store in state.postings:
                fh.write(struct.pack("<Q", store.size))
                fh.write(np.ascontiguousarray(store.ids[:store.size],
                                              dtype="<i8").tobytes())
                raw = store.vectors16().view(np.uint16)
                fh.write(np.ascontiguousarray(raw, dtype="<u2").tobytes())
            fh.write(np.ascontiguousarray(state.tombstone_array,
                                          dtype="<i8").tobytes())

    @classmethod
    def load(cls, path, engine: Engine) -> "VectorIndex":
        with open(path, "rb") as fh:
            blob = fh.read()
        off = 0

        def take(n, what):
            nonlocal off
            if off + n > len(blob):
                raise PersistenceError(
                    f"{path}: truncated while reading {what} at byte {off}")
            out = blob[off:off + n]
            off += n
            return out

        if take(4, "magic") != MAGIC:
            raise PersistenceError(f"{path}: bad magic, not an index file")
        (version, dim, dim_padded, n_clusters, mt, nt, kt, nprobe_default,
         n_tomb) = struct.unpack("<IIIIIIIIQ", take(40, "header"))
        if version != FORMAT_VERSION:
            raise PersistenceError(f"{path}: unsupported version {version}")
        tile = TileSpec(mt, nt, kt)
        centroids = np.frombuffer(
            take(4 * n_clusters * dim_padded, "centroid block"),
            dtype="<f4").reshape(n_clusters, dim_padded).copy()
        postings = []
        id_to_loc = {}
        for c in range(n_clusters):
            (size,) = struct.unpack("<Q", take(8, f"posting header {c}"))
            ids = np.frombuffer(take(8 * size, f"posting ids {c}"),
                                dtype="<i8").copy()
            raw = np.frombuffer(take(2 * size * dim_padded, f"posting vectors {c}"),
                                dtype="<u2").reshape(size, dim_padded)
            store = PostingStore(dim_padded, tile)
            store.bulk_load(ids, raw.view(np.float16))
            postings.append(store)
            for pos, id_ in enumerate(ids):
                id_to_loc[int(id_)] = (c, pos)
        tomb = np.frombuffer(take(8 * n_tomb, "tombstones"), dtype="<i8").copy()
        if off != len(blob):
            raise PersistenceError(f"{path}: {len(blob) - off} trailing bytes")

        state = IndexState(
            dim=dim, dim_padded=dim_padded, n_clusters=n_clusters,
            tile_spec=tile, centroids=centroids,
            centroid_norms=_centroid_norms(centroids),
            centroid_pack=None, centroid_handle=-1, postings=postings,
            id_to_loc=id_to_loc, tombstones=frozenset(int(t) for t in tomb),
            tombstone_array=tomb, nprobe_default=nprobe_default)
        _pack_centroids(engine, state)
        return cls(engine, state)


# -- build helpers -------------------------------------------------------------


def _assignment_scores(engine: Engine, template: Template, a_handle, a_buffer,
                       centroids: np.ndarray, n_rows: int, cfg: EngineConfig):
    """One Lloyd's pass worth of x . c^T, chunked into row-band tasks."""
    tile = cfg.tile_spec
    dim_padded = centroids.shape[1]
    n_clusters = centroids.shape[0]
    pack_out = {}

    def pack_centroids():
        buf = pack_fp16_tile_major(PackDescriptor(
            MatrixBuffer.from_array(centroids), tile, transpose=True, operand="b"))
        pack_out["handle"] = engine.fabric.register(buf)
        return pack_out["handle"]

    sim_time = 0.0
    run = engine.run([engine.new_task(
        TaskKind.PACK, TransformWork(pack_centroids, nbytes=centroids.nbytes * 1.5),
        template, payload_bytes=centroids.nbytes)])
    sim_time += run.makespan_us

    band_tiles = max(cfg.assign_chunk_rows // tile.m_tile, 1)
    gm = a_buffer.rows // tile.m_tile
    tasks = []
    spans = []
    for t0 in range(0, gm, band_tiles):
        t1 = min(t0 + band_tiles, gm)
        band = a_buffer.row_band(t0, t1)
        handle = engine.fabric.register(band)
        rows_here = min(n_rows - t0 * tile.m_tile, band.rows)
        gemm = GemmWork((GemmTask(handle, pack_out["handle"],
                                  rows_here, n_clusters),))
        tasks.append(engine.new_task(
            TaskKind.ASSIGNMENT_GEMM, gemm, template,
            m_hint=band.rows, k_hint=dim_padded,
            estimated_flops=2.0 * band.rows * n_clusters * dim_padded))
        spans.append((t0 * tile.m_tile, rows_here))
    run = engine.run(tasks)
    sim_time += run.makespan_us

    scores = np.empty((n_rows, n_clusters), dtype=np.float32)
    for task, (start, rows_here) in zip(tasks, spans):
        scores[start:start + rows_here] = run.results[task.task_id][0]
        engine.fabric.unmap(task.work.tasks[0].a_handle)
    engine.fabric.unmap(pack_out["handle"])
    return scores, sim_time


def _labels_from_scores(scores: np.ndarray, centroid_norms: np.ndarray) -> np.ndarray:
    # argmin of |x|^2 + |c|^2 - 2 x.c over c; the |x|^2 term is constant per row.
    d = centroid_norms[None, :] - 2.0 * scores
    return np.argmin(d, axis=1).astype(np.int64)


def _update_centroids(xp: np.ndarray, labels: np.ndarray, n_clusters: int,
                      rng: np.random.Generator):
    dim = xp.shape[1]
    sums = np.zeros((n_clusters, dim), dtype=np.float64)
    np.add.at(sums, labels, xp.astype(np.float64))
    counts = np.bincount(labels, minlength=n_clusters).astype(np.float64)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        # Re-seed each empty cluster from the point farthest from its
        # centroid, never draining a donor cluster below one member.
        current = sums / counts[:, None].clip(min=1.0)
        d2 = np.einsum("ij,ij->i", xp, xp) \
            + np.einsum("ij,ij->i", current[labels], current[labels]) \
            - 2.0 * np.einsum("ij,ij->i", xp, current[labels])
        order = np.argsort(-d2, kind="stable")
        taken = 0
        for c in empty:
            while True:
                pick = int(order[taken])
                taken += 1
                if counts[labels[pick]] > 1:
                    break
            old = labels[pick]
            sums[old] -= xp[pick]
            counts[old] -= 1
            sums[c] = xp[pick]
            counts[c] = 1
            labels[pick] = c
    centroids = (sums / counts[:, None]).astype(np.float32)
    return centroids, labels


def _objective(xp: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    diff = xp.astype(np.float64) - centroids.astype(np.float64)[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def _assemble_state(engine, cfg, dim, dim_padded, n_clusters, centroids,
                    ids, x16, labels) -> IndexState:
    postings = []
    id_to_loc = {}
    for c in range(n_clusters):
        store = PostingStore(dim_padded, cfg.tile_spec)
        members = np.flatnonzero(labels == c)
        if members.size:
            store.bulk_load(ids[members], x16[members])
            for pos, m in enumerate(members):
                id_to_loc[int(ids[m])] = (c, pos)
        postings.append(store)
    state = IndexState(
        dim=dim, dim_padded=dim_padded, n_clusters=n_clusters,
        tile_spec=cfg.tile_spec, centroids=centroids,
        centroid_norms=_centroid_norms(centroids), centroid_pack=None,
        centroid_handle=-1, postings=postings, id_to_loc=id_to_loc)
    _pack_centroids(engine, state)
    return state


def _pack_centroids(engine: Engine, state: IndexState):
    buf = pack_fp16_tile_major(PackDescriptor(
        MatrixBuffer.from_array(state.centroids), state.tile_spec,
        transpose=True, operand="b"))
    state.centroid_pack = buf
    state.centroid_handle = engine.fabric.register(buf)


def _probe_clusters(centroid_scores: np.ndarray, centroid_norms: np.ndarray,
                    nprobe: int) -> np.ndarray:
    """nprobe nearest clusters per query (L2 identity; ties by cluster id)."""
    d = centroid_norms[None, :] - 2.0 * centroid_scores
    n_clusters = d.shape[1]
    cluster_ids = np.arange(n_clusters)
    out = np.empty((d.shape[0], nprobe), dtype=np.int64)
    for i in range(d.shape[0]):
        order = np.lexsort((cluster_ids, d[i]))
        out[i] = order[:nprobe]
    return out


def _live_records(state: IndexState):
    ids_parts, vec_parts = [], []
    for store in state.postings:
        if store.size == 0:
            continue
        ids = store.ids[:store.size]
        vecs = store.vectors16()
        if state.tombstone_array.size:
            live = ~np.isin(ids, state.tombstone_array)
            ids, vecs = ids[live], vecs[live]
        ids_parts.append(ids)
        vec_parts.append(vecs)
    if not ids_parts:
        return np.empty(0, np.int64), np.empty((0, state.dim_padded), np.float16)
    return np.concatenate(ids_parts), np.concatenate(vec_parts)
