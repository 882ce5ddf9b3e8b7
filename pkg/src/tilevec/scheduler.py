"""Template-driven scheduling: windowed submission, worker-pulled execution.

Logical operations are decomposed into fine-grained tasks.  Submission
releases at most ``window_size`` tasks into the global queue at a time,
bounding peak task-payload memory; backend-bound workers pull the highest
priority eligible task whenever idle, so faster devices naturally consume
more tasks.

The engine executes in virtual (simulated) time: every worker owns a clock
advanced by its device's cost model, and pulls are processed as a
discrete-event simulation.  This keeps makespans deterministic for a given
seed while still letting tests randomize interleavings (chaos seeds perturb
tie-breaking and add duration jitter); numeric results are independent of
the interleaving by construction.
"""

from __future__ import annotations

import enum
import heapq
import itertools
from dataclasses import dataclass, field

import numpy as np

from .backends import Backend, DeviceKind
from .buffers import FP16
from .config import EngineConfig
from .costmodel import PipelineMode
from .errors import EngineError, InputError
from .fabric import Fabric
from .pipeline import GemmBatch, GemmTask


class TaskKind(enum.Enum):
    CENTROID_GEMM = "centroid_gemm"
    POSTING_SCAN = "posting_scan"
    ASSIGNMENT_GEMM = "assignment_gemm"
    TOPK_MERGE = "topk_merge"
    PACK = "pack"
    TRANSPOSE = "transpose"


class PriorityClass(enum.IntEnum):
    QUERY = 0
    UPDATE = 1
    REBUILD = 2


class TemplateName(enum.Enum):
    QUERY = "query"
    UPDATE = "update"
    INDEX = "index"
    HYBRID = "hybrid"


_CPU = (DeviceKind.CPU,)
_ALL = (DeviceKind.NPU, DeviceKind.GPU, DeviceKind.CPU)


@dataclass(frozen=True)
class Template:
    """Routing policy: task kind -> device preference order + priority class."""

    name: TemplateName
    routing: dict
    priority: dict

    def devices_for(self, kind: TaskKind) -> tuple[DeviceKind, ...]:
        return self.routing[kind]

    def priority_of(self, kind: TaskKind) -> PriorityClass:
        return self.priority[kind]


def make_template(name: TemplateName) -> Template:
    query_kinds = (TaskKind.CENTROID_GEMM, TaskKind.POSTING_SCAN, TaskKind.PACK,
                   TaskKind.TRANSPOSE)
    if name is TemplateName.QUERY:
        # Latency-critical lookups: vector search runs on the host CPU.
        routing = {k: _CPU for k in TaskKind}
        priority = {k: PriorityClass.QUERY for k in TaskKind}
    elif name is TemplateName.UPDATE:
        # Frequent small inserts: GPU does batched assignment, CPU keeps
        # metadata and aggregation.
        routing = {k: _CPU for k in TaskKind}
        routing[TaskKind.ASSIGNMENT_GEMM] = (DeviceKind.GPU,)
        routing[TaskKind.PACK] = (DeviceKind.GPU, DeviceKind.CPU)
        priority = {k: PriorityClass.UPDATE for k in TaskKind}
    elif name is TemplateName.INDEX:
        # Throughput-oriented rebuilds: every device participates.
        routing = {k: _ALL for k in TaskKind}
        routing[TaskKind.TOPK_MERGE] = _CPU
        priority = {k: PriorityClass.REBUILD for k in TaskKind}
    elif name is TemplateName.HYBRID:
        # The NPU is reserved for query-class work; updates share CPU/GPU
        # by queue depth (emergent from worker pulls).
        routing = {k: _CPU for k in TaskKind}
        for k in query_kinds:
            routing[k] = _ALL
        routing[TaskKind.ASSIGNMENT_GEMM] = (DeviceKind.GPU, DeviceKind.CPU)
        routing[TaskKind.TOPK_MERGE] = _CPU
        priority = {k: PriorityClass.QUERY for k in TaskKind}
        priority[TaskKind.ASSIGNMENT_GEMM] = PriorityClass.UPDATE
    else:
        raise InputError(f"unknown template {name}")
    # Top-k aggregation is host-CPU work in every template.
    assert routing[TaskKind.TOPK_MERGE] == _CPU
    return Template(name, routing, priority)


@dataclass(frozen=True)
class WorkloadSnapshot:
    pending_queries: int = 0
    pending_updates: int = 0
    rebuild: bool = False


def select_template(snapshot: WorkloadSnapshot) -> Template:
    if snapshot.rebuild:
        return make_template(TemplateName.INDEX)
    if snapshot.pending_queries and snapshot.pending_updates:
        return make_template(TemplateName.HYBRID)
    if snapshot.pending_updates:
        return make_template(TemplateName.UPDATE)
    return make_template(TemplateName.QUERY)


# --- task work payloads ----------------------------------------------------


@dataclass(frozen=True)
class GemmWork:
    """A batch of GEMMs sharing one invocation on whichever device runs it."""

    tasks: tuple[GemmTask, ...]
    mode: PipelineMode | None = None  # None: device default

    def execute(self, backend: Backend, rng):
        batch = GemmBatch(self.tasks, self.mode or backend.profile.default_mode)
        res = backend.execute(batch, rng)
        return res.outputs, res.sim_time_us

    def geometry(self, fabric: Fabric):
        out = []
        for t in self.tasks:
            a, b = fabric.get(t.a_handle), fabric.get(t.b_handle)
            out.append((a.rows, b.cols, a.cols, (a.element_type, b.element_type)))
        return out


@dataclass(frozen=True)
class HostWork:
    """Control-flow-heavy host work (merges, bookkeeping)."""

    fn: object
    cost_us: float = 1.0

    def execute(self, backend, rng):
        return self.fn(), self.cost_us


@dataclass(frozen=True)
class TransformWork:
    """Layout/type transforms metered by the device's conversion bandwidth."""

    fn: object
    nbytes: float

    def execute(self, backend: Backend, rng):
        return self.fn(), self.nbytes / backend.profile.cost.conversion_bandwidth


@dataclass
class Task:
    task_id: int
    kind: TaskKind
    work: object
    eligible: tuple[DeviceKind, ...] = ()
    priority: PriorityClass = PriorityClass.QUERY
    estimated_flops: float = 0.0
    payload_bytes: float = 0.0
    m_hint: int = 64
    k_hint: int = 64
    arrival_us: float = 0.0
    seq: int = -1
    ready_at: float = 0.0


@dataclass
class TaskFailure:
    error: Exception


@dataclass
class RunResult:
    results: dict
    failures: dict
    start_us: dict
    completion_us: dict
    makespan_us: float
    max_in_flight: int
    peak_payload_bytes: float
    pulls_per_worker: dict
    update_pulls_with_query_eligible: int
    trace: list


def merge_topk(partial_lists, k: int):
    """Exact top-k over partial (id, score) lists, descending score with ties
    broken by smaller id; duplicate ids keep their best score."""
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    best = {}
    for plist in partial_lists:
        for id_, score in plist:
            if id_ not in best or score > best[id_]:
                best[id_] = score
    return sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))[:k]


class _WorkerState:
    def __init__(self, backend: Backend):
        self.backend = backend
        self.kind = backend.profile.kind
        self.name = backend.profile.name
        self.clock = 0.0
        self.pulls = 0


class Engine:
    """Owns the fabric, the backends, and the virtual-time scheduler."""

    def __init__(self, config: EngineConfig | None = None, trace_path=None):
        self.config = config or EngineConfig()
        self.fabric = Fabric()
        self.backends = [Backend(p, self.fabric, self.config.staging_capacity_bytes)
                         for p in self.config.device_profiles]
        ss = np.random.SeedSequence(self.config.seed)
        children = ss.spawn(len(self.backends) + 1)
        self._invocation_rngs = {b.profile.name: np.random.default_rng(children[i])
                                 for i, b in enumerate(self.backends)}
        self._task_ids = itertools.count(1)
        self.trace_path = trace_path

    # -- task construction ---------------------------------------------------

    def new_task(self, kind: TaskKind, work, template: Template,
                 payload_bytes: float = 0.0, m_hint: int = 64, k_hint: int = 64,
                 estimated_flops: float = 0.0, arrival_us: float = 0.0) -> Task:
        eligible = self._eligible_devices(kind, work, template)
        if not eligible:
            raise InputError(f"no capable device for task kind {kind.value}")
        return Task(task_id=next(self._task_ids), kind=kind, work=work,
                    eligible=eligible, priority=template.priority_of(kind),
                    payload_bytes=payload_bytes, m_hint=m_hint, k_hint=k_hint,
                    estimated_flops=estimated_flops, arrival_us=arrival_us)

    def _eligible_devices(self, kind, work, template):
        routed = template.devices_for(kind)
        if not isinstance(work, GemmWork):
            return tuple(routed)
        geometry = work.geometry(self.fabric)
        out = []
        for dev in routed:
            profile = next((b.profile for b in self.backends
                            if b.profile.kind is dev), None)
            if profile is None:
                continue
            ok = True
            for m, n, k, etypes in geometry:
                if any(t not in profile.supported_types for t in etypes):
                    ok = False
                    break
                mk = profile.min_kernel
                if mk and (m < mk.m_tile or n < mk.n_tile or k < mk.k_tile):
                    ok = False
                    break
            if ok:
                out.append(dev)
        return tuple(out)

    def gemm_shapes(self):
        shapes = []
        for b in self.backends:
            shapes.extend(b.gemm_shape_log)
        return shapes

    def reset_instrumentation(self):
        for b in self.backends:
            b.gemm_shape_log.clear()

    # -- the virtual-time event loop -----------------------------------------

    def run(self, tasks, window_size: int | None = None,
            chaos_seed: int | None = None, jitter: float = 0.0,
            fifo_policy: bool = False,
            initial_clocks: dict | None = None) -> RunResult:
        """Drive tasks to completion; returns results plus instrumentation.

        ``fifo_policy`` disables class priorities (single global FIFO) for
        policy A/B comparisons.  ``chaos_seed``/``jitter`` randomize worker
        tie-breaking and task durations to explore interleavings.
        """
        window = window_size or self.config.window_size
        if window < 1:
            raise InputError("window size must be >= 1")
        chaos = np.random.default_rng(chaos_seed) if chaos_seed is not None else None

        workers = [_WorkerState(b) for b in self.backends]
        if initial_clocks:
            for w in workers:
                w.clock = initial_clocks.get(w.name, w.clock)

        backlog = list(tasks)
        for seq, task in enumerate(backlog):
            task.seq = seq
        ready: list[Task] = []
        completions: list = []  # heap of (time, tiebreak, task_id)
        counter = itertools.count()
        results, failures = {}, {}
        start_us, completion_us = {}, {}
        trace: list[str] = []
        in_flight = 0
        max_in_flight = 0
        payload_now = 0.0
        payload_peak = 0.0
        bad_update_pulls = 0
        next_release = 0

        def release(now: float):
            nonlocal next_release, in_flight, payload_now, payload_peak, max_in_flight
            while next_release < len(backlog) and in_flight < window:
                task = backlog[next_release]
                task.ready_at = max(now, task.arrival_us)
                ready.append(task)
                in_flight += 1
                payload_now += task.payload_bytes
                next_release += 1
                trace.append(f"{task.ready_at:.3f} worker=- task={task.task_id} "
                             f"kind={task.kind.value} device=- event=release")
            max_in_flight = max(max_in_flight, in_flight)
            payload_peak = max(payload_peak, payload_now)

        def sort_key(task: Task, now: float):
            prio = int(task.priority)
            if fifo_policy:
                prio = 0
            elif (self.config.update_aging_us is not None
                  and task.priority is PriorityClass.UPDATE
                  and now - task.ready_at >= self.config.update_aging_us):
                prio = int(PriorityClass.QUERY)
            return prio, task.seq

        def pick():
            # The idle worker with the earliest feasible start pulls first;
            # equal starts prefer higher-priority head tasks, then the device
            # with the larger heatmap rate for that task's (M, K) bucket.
            best = None
            for w in workers:
                cand = None
                for task in ready:
                    if w.kind not in task.eligible:
                        continue
                    start = max(w.clock, task.ready_at)
                    key = (start, *sort_key(task, start))
                    if cand is None or key < cand[0]:
                        cand = (key, task)
                if cand is None:
                    continue
                (start, prio, seq), task = cand[0], cand[1]
                rate = w.backend.profile.cost.heatmap.lookup(task.m_hint, task.k_hint)
                tie = chaos.random() if chaos is not None else 0.0
                key = (start, tie, prio, seq, -rate, w.name)
                if best is None or key < best[0]:
                    best = (key, w, task)
            return best

        release(0.0)
        while ready or completions:
            choice = pick()
            if choice is None and not completions:
                raise EngineError("ready tasks have no eligible worker")
            next_completion = completions[0][0] if completions else float("inf")
            if choice is not None and choice[0][0] < next_completion:
                key, worker, task = choice
                start = key[0]
                ready.remove(task)
                if (not fifo_policy and task.priority is not PriorityClass.QUERY):
                    eligible_queries = sum(
                        1 for t in ready
                        if t.priority is PriorityClass.QUERY
                        and worker.kind in t.eligible and t.ready_at <= start)
                    if task.priority is PriorityClass.UPDATE and eligible_queries:
                        bad_update_pulls += 1
                else:
                    eligible_queries = 0
                try:
                    result, dur = task.work.execute(
                        worker.backend, self._invocation_rngs[worker.name])
                except EngineError as exc:
                    result, dur = TaskFailure(exc), 1.0
                if jitter and chaos is not None:
                    dur *= 1.0 + jitter * float(chaos.random())
                worker.clock = start + dur
                worker.pulls += 1
                start_us[task.task_id] = start
                trace.append(
                    f"{start:.3f} worker={worker.name} task={task.task_id} "
                    f"kind={task.kind.value} device={worker.kind.value} "
                    f"event=pull eligible_query={eligible_queries}")
                heapq.heappush(completions,
                               (worker.clock, next(counter), task, worker, result))
            else:
                now, _, task, worker, result = heapq.heappop(completions)
                if isinstance(result, TaskFailure):
                    failures[task.task_id] = result.error
                else:
                    if task.task_id in results:
                        raise EngineError(f"task {task.task_id} completed twice")
                    results[task.task_id] = result
                completion_us[task.task_id] = now
                in_flight -= 1
                payload_now -= task.payload_bytes
                trace.append(f"{now:.3f} worker={worker.name} task={task.task_id} "
                             f"kind={task.kind.value} device={worker.kind.value} "
                             f"event=complete")
                release(now)

        makespan = max(completion_us.values(), default=0.0)
        if self.trace_path:
            with open(self.trace_path, "a") as fh:
                fh.write("\n".join(trace) + ("\n" if trace else ""))
        return RunResult(results=results, failures=failures, start_us=start_us,
                         completion_us=completion_us, makespan_us=makespan,
                         max_in_flight=max_in_flight,
                         peak_payload_bytes=payload_peak,
                         pulls_per_worker={w.name: w.pulls for w in workers},
                         update_pulls_with_query_eligible=bad_update_pulls,
                         trace=trace)
