"""Compute backends: one real CPU device and simulated GPU/NPU devices.

Every backend runs the same software kernels, so numeric results are device
independent; devices differ only in constraints (the NPU accepts fp16 only
and enforces a minimum kernel) and in the cost model that meters simulated
time.  The profiler builds the (M, K) -> GFLOPS heatmap the scheduler uses
for routing.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from .buffers import FP16, FP32, MatrixBuffer, TileSpec
from .costmodel import CostModel, Heatmap, PipelineMode, pipeline_time_us
from .errors import DeviceConstraintError, InputError
from .fabric import Fabric
from .pipeline import BatchResult, GemmBatch, execute_batch, tile_plan_for


class DeviceKind(enum.Enum):
    CPU = "cpu"
    GPU = "gpu"
    NPU = "npu"


M_BUCKETS = (32, 64, 128, 256, 512, 1024, 2048, 4096)
K_BUCKETS = (64, 128, 256, 512, 1024)


@dataclass(frozen=True)
class DeviceProfile:
    kind: DeviceKind
    name: str
    cost: CostModel
    supported_types: frozenset = frozenset({FP16})
    min_kernel: TileSpec | None = None
    default_mode: PipelineMode = PipelineMode.TCM_DMA

    def check_batch(self, batch: GemmBatch, fabric: Fabric):
        """Reject constraint violations loudly; silent conversion would hide
        routing bugs."""
        for task in batch.tasks:
            for handle in (task.a_handle, task.b_handle):
                buf = fabric.get(handle)
                if buf.element_type not in self.supported_types:
                    raise DeviceConstraintError(
                        f"{self.name} does not support {buf.element_type} operands")
            if self.min_kernel is not None:
                a = fabric.get(task.a_handle)
                b = fabric.get(task.b_handle)
                m, k, n = a.rows, a.cols, b.cols
                mk = self.min_kernel
                if m < mk.m_tile or n < mk.n_tile or k < mk.k_tile:
                    raise DeviceConstraintError(
                        f"{self.name} minimum kernel is {mk.m_tile}x{mk.n_tile}x"
                        f"{mk.k_tile}, got {m}x{n}x{k}")


@dataclass
class Backend:
    profile: DeviceProfile
    fabric: Fabric
    staging_capacity_bytes: int | None = None
    gemm_shape_log: list = field(default_factory=list)

    def execute(self, batch: GemmBatch, rng: np.random.Generator) -> BatchResult:
        self.profile.check_batch(batch, self.fabric)
        result = execute_batch(batch, self.profile.cost, self.fabric, rng,
                               self.staging_capacity_bytes)
        self.gemm_shape_log.extend(result.shapes)
        return result


def _ramp(lo: float, hi: float, reverse: bool = False) -> tuple[tuple[float, ...], ...]:
    rows = []
    denom = (len(M_BUCKETS) - 1) + (len(K_BUCKETS) - 1)
    for i in range(len(M_BUCKETS)):
        row = []
        for j in range(len(K_BUCKETS)):
            s = (i + j) / denom
            if reverse:
                s = 1.0 - s
            row.append(lo + (hi - lo) * s)
        rows.append(tuple(row))
    return tuple(rows)


def default_profiles() -> list[DeviceProfile]:
    """Illustrative device surfaces shaped after typical mobile SoCs: the NPU
    dominates large kernels, the CPU wins tiny ones where accelerator
    invocation cost dominates, the GPU sits between.  Values are config, not
    measurements."""
    cpu = DeviceProfile(
        kind=DeviceKind.CPU, name="cpu0",
        cost=CostModel(
            heatmap=Heatmap(M_BUCKETS, K_BUCKETS, _ramp(40.0, 75.0, reverse=True)),
            stream_bandwidth=20000.0, dma_bandwidth=20000.0,
            invocation_us=(1.0, 2.0), smt_speedup=1.0, memcpy_penalty=1.0),
        supported_types=frozenset({FP16, FP32}),
        default_mode=PipelineMode.TCM_DMA)
    gpu = DeviceProfile(
        kind=DeviceKind.GPU, name="gpu0",
        cost=CostModel(
            heatmap=Heatmap(M_BUCKETS, K_BUCKETS, _ramp(90.0, 700.0)),
            stream_bandwidth=15000.0, dma_bandwidth=30000.0,
            invocation_us=(40.0, 60.0), smt_speedup=1.1, memcpy_penalty=1.5),
        supported_types=frozenset({FP16, FP32}),
        default_mode=PipelineMode.TCM_DMA)
    npu = DeviceProfile(
        kind=DeviceKind.NPU, name="npu0",
        cost=CostModel(
            heatmap=Heatmap(M_BUCKETS, K_BUCKETS, _ramp(120.0, 2000.0)),
            stream_bandwidth=10000.0, dma_bandwidth=40000.0,
            invocation_us=(200.0, 700.0), smt_speedup=1.25, memcpy_penalty=2.0),
        supported_types=frozenset({FP16}),
        min_kernel=TileSpec(32, 64, 64),
        default_mode=PipelineMode.DMA_OVERLAP)
    return [cpu, gpu, npu]


def profile_heatmap(backend: Backend, m_buckets=M_BUCKETS, k_buckets=K_BUCKETS,
                    reps: int = 3, bench_n: int = 256,
                    tile_spec: TileSpec | None = None) -> Heatmap:
    """Effective-throughput heatmap of a backend.

    Simulated devices derive it from their cost model (deterministic);
    the CPU is measured with wall-clock medians so the result can be frozen
    to a file and reused for reproducible scheduling.
    """
    spec = tile_spec or TileSpec()
    rows = []
    for m in m_buckets:
        row = []
        for k in k_buckets:
            flops = 2.0 * m * bench_n * k
            if backend.profile.kind is DeviceKind.CPU:
                row.append(_measure_cpu_gflops(m, bench_n, k, spec, reps))
            else:
                a = MatrixBuffer.alloc(m, k, FP16, spec.a_tile)
                b = MatrixBuffer.alloc(k, bench_n, FP16, spec.b_tile)
                plan = tile_plan_for(a, b, backend.profile.cost.heatmap.lookup(m, k))
                lo, _ = backend.profile.cost.invocation_us
                us = pipeline_time_us(plan, backend.profile.default_mode,
                                      backend.profile.cost, lo)
                row.append(flops / (us * 1e3))
        rows.append(tuple(row))
    return Heatmap(tuple(m_buckets), tuple(k_buckets), tuple(rows))


def _measure_cpu_gflops(m: int, n: int, k: int, spec: TileSpec, reps: int) -> float:
    from .gemm import gemm_tile_major
    rng = np.random.default_rng(0)
    a = MatrixBuffer.alloc(m, k, FP16, spec.a_tile)
    b = MatrixBuffer.alloc(k, n, FP16, spec.b_tile)
    a.data[:] = rng.standard_normal(a.data.size).astype(np.float16)
    b.data[:] = rng.standard_normal(b.data.size).astype(np.float16)
    samples = []
    for _ in range(max(reps, 1)):
        t0 = time.perf_counter()
        gemm_tile_major(a, b)
        samples.append(time.perf_counter() - t0)
    seconds = float(np.median(samples))
    return 2.0 * m * n * k / max(seconds, 1e-9) / 1e9


def profile_by_kind(profiles: list[DeviceProfile], kind: DeviceKind) -> DeviceProfile:
    for p in profiles:
        if p.kind is kind:
            return p
    raise InputError(f"no {kind.value} device configured")
