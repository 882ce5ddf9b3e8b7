"""Batched GEMM execution: numeric kernels plus the simulated-time account.

A GemmBatch shares one invocation cost across its tasks, which is what makes
batched submission cheaper than issuing tasks one by one.  Numeric results
are mode-independent by construction; only the simulated time differs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .buffers import MatrixBuffer, TileSpec
from .costmodel import (CostModel, PipelineMode, StagingTrace, TilePlan,
                        pipeline_time_us)
from .errors import CapacityError, InputError, ShapeError
from .fabric import Fabric
from .gemm import gemm_tile_major


@dataclass(frozen=True)
class GemmTask:
    """One GEMM over registered operands; logical dims select the result."""

    a_handle: int
    b_handle: int
    logical_m: int
    logical_n: int


@dataclass(frozen=True)
class GemmBatch:
    tasks: tuple[GemmTask, ...]
    mode: PipelineMode = PipelineMode.DMA_OVERLAP

    def __post_init__(self):
        if not self.tasks:
            raise InputError("empty GEMM batch")


@dataclass(frozen=True)
class BatchResult:
    outputs: tuple[np.ndarray, ...]
    sim_time_us: float
    staging: StagingTrace
    shapes: tuple[tuple[int, int, int], ...]  # padded (M, N, K) per task


def tile_plan_for(a: MatrixBuffer, b: MatrixBuffer, rate_gflops: float) -> TilePlan:
    """Tile stream of one GEMM: every (output tile, K chunk) step stages one
    A tile and one B tile and performs one micro product."""
    gm, gk = a.tile_grid()
    _, gn = b.tile_grid()
    mt, kt = a.tiling.tile_rows, a.tiling.tile_cols
    nt = b.tiling.tile_cols
    steps = gm * gn * gk
    flops = 2.0 * mt * nt * kt
    pair_bytes = 2.0 * (mt * kt + kt * nt)
    return TilePlan((flops,) * steps, (pair_bytes,) * steps, rate_gflops)


def execute_batch(batch: GemmBatch, model: CostModel, fabric: Fabric,
                  rng: np.random.Generator,
                  staging_capacity_bytes: int | None = None) -> BatchResult:
    """Run every task's kernel and account one shared invocation."""
    pairs = []
    for task in batch.tasks:
        a = fabric.get(task.a_handle)
        b = fabric.get(task.b_handle)
        if task.logical_m > a.rows or task.logical_n > b.cols:
            raise ShapeError("logical dims exceed operand dims")
        pairs.append((a, b))

    invocation = model.sample_invocation_us(rng)
    outputs = []
    shapes = []
    flops_parts = []
    bytes_parts = []
    rate = None
    for task, (a, b) in zip(batch.tasks, pairs):
        full = gemm_tile_major(a, b)
        outputs.append(full[:task.logical_m, :task.logical_n].copy())
        shapes.append((a.rows, b.cols, a.cols))
        plan = tile_plan_for(a, b, model.heatmap.lookup(a.rows, a.cols))
        flops_parts.extend(plan.flops)
        bytes_parts.extend(plan.bytes)
        if rate is None or plan.rate_gflops < rate:
            rate = plan.rate_gflops  # conservative: slowest bucket paces the stream

    plan = TilePlan(tuple(flops_parts), tuple(bytes_parts), rate)
    trace = StagingTrace()
    sim_time = pipeline_time_us(plan, batch.mode, model, invocation, trace)
    if staging_capacity_bytes is not None and trace.peak_resident_bytes > staging_capacity_bytes:
        raise CapacityError(
            f"staging residency {trace.peak_resident_bytes} exceeds "
            f"capacity {staging_capacity_bytes}")
    return BatchResult(tuple(outputs), sim_time, trace, tuple(shapes))


def submit_batched(tasks, mode: PipelineMode, model: CostModel, fabric: Fabric,
                   rng: np.random.Generator,
                   staging_capacity_bytes: int | None = None) -> BatchResult:
    """Submit tasks as one batch (one shared invocation)."""
    return execute_batch(GemmBatch(tuple(tasks), mode), model, fabric, rng,
                         staging_capacity_bytes)


def staging_fits(tile_spec: TileSpec, capacity_bytes: int) -> bool:
    """Double buffering needs two tile pairs resident."""
    return 2 * tile_spec.pair_bytes() <= capacity_bytes
