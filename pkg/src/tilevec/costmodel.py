"""Deterministic accelerator cost models and the staged-pipeline time formulas.

Simulated time is a closed-form function of the tile stream and the model
parameters; wall-clock never enters.  The five pipeline configurations are
cumulative, mirroring the ablation ladder:

  E  baseline     compute at base rate, operands streamed (no on-chip staging)
  D  smt          adds the SMT speedup to compute
  C  tcm_memcpy   stages tiles on chip, but fills staging via cpu memcpy
  B  tcm_dma      staging filled by DMA at full bandwidth
  A  dma_overlap  B plus execution-transfer overlap via double buffering

With the declared parameter constraints (speedup >= 1, dma bandwidth >=
stream bandwidth, 1 <= memcpy penalty <= dma/stream ratio) the modeled
throughput ordering A >= B >= max(C, D) >= E holds for every batch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ShapeError


class PipelineMode(enum.Enum):
    BASELINE = "E"
    SMT = "D"
    TCM_MEMCPY = "C"
    TCM_DMA = "B"
    DMA_OVERLAP = "A"

    @classmethod
    def from_letter(cls, letter: str) -> "PipelineMode":
        for mode in cls:
            if mode.value == letter.upper():
                return mode
        raise InputError(f"unknown pipeline mode {letter!r} (use A..E)")


MODE_ORDER = [PipelineMode.BASELINE, PipelineMode.SMT, PipelineMode.TCM_MEMCPY,
              PipelineMode.TCM_DMA, PipelineMode.DMA_OVERLAP]


@dataclass(frozen=True)
class Heatmap:
    """GEMM throughput surface: (M bucket, K bucket) -> effective GFLOPS."""

    m_buckets: tuple[int, ...]
    k_buckets: tuple[int, ...]
    gflops: tuple[tuple[float, ...], ...]  # [m_index][k_index]

    def __post_init__(self):
        if len(self.gflops) != len(self.m_buckets):
            raise ShapeError("heatmap rows != m bucket count")
        for row in self.gflops:
            if len(row) != len(self.k_buckets):
                raise ShapeError("heatmap cols != k bucket count")
            if min(row) <= 0:
                raise ShapeError("heatmap rates must be strictly positive")

    @staticmethod
    def _nearest(buckets: tuple[int, ...], value: int) -> int:
        # Nearest bucket on a log scale; clamps outside the grid.
        logs = np.log2(np.asarray(buckets, dtype=np.float64))
        return int(np.argmin(np.abs(logs - np.log2(max(value, 1)))))

    def lookup(self, m: int, k: int) -> float:
        return self.gflops[self._nearest(self.m_buckets, m)][self._nearest(self.k_buckets, k)]


def save_heatmap(path, device: str, heatmap: Heatmap):
    with open(path, "w") as fh:
        fh.write("tilevec-heatmap v1\n")
        fh.write(f"device {device}\n")
        fh.write("m_buckets " + " ".join(str(b) for b in heatmap.m_buckets) + "\n")
        fh.write("k_buckets " + " ".join(str(b) for b in heatmap.k_buckets) + "\n")
        for row in heatmap.gflops:
            fh.write(" ".join(f"{v:.6g}" for v in row) + "\n")


def load_heatmap(path) -> tuple[str, Heatmap]:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != "tilevec-heatmap v1":
        raise InputError(f"{path}: not a v1 heatmap file")
    device = lines[1].split()[1]
    m_buckets = tuple(int(v) for v in lines[2].split()[1:])
    k_buckets = tuple(int(v) for v in lines[3].split()[1:])
    rows = tuple(tuple(float(v) for v in ln.split()) for ln in lines[4:])
    return device, Heatmap(m_buckets, k_buckets, rows)


@dataclass(frozen=True)
class CostModel:
    """Per-device timing parameters.  Bandwidths are bytes per microsecond."""

    heatmap: Heatmap
    stream_bandwidth: float  # un-staged operand streaming (modes E, D)
    dma_bandwidth: float     # on-chip staging fill via DMA (modes C, B, A)
    invocation_us: tuple[float, float] = (200.0, 700.0)
    smt_speedup: float = 1.25
    memcpy_penalty: float = 2.0
    conversion_bandwidth: float = 8000.0  # pack/transpose throughput

    def __post_init__(self):
        if self.stream_bandwidth <= 0 or self.dma_bandwidth <= 0:
            raise InputError("bandwidths must be positive")
        if self.dma_bandwidth < self.stream_bandwidth:
            raise InputError("dma bandwidth must be >= stream bandwidth")
        if self.smt_speedup < 1.0:
            raise InputError("smt speedup must be >= 1")
        if not 1.0 <= self.memcpy_penalty <= self.dma_bandwidth / self.stream_bandwidth:
            raise InputError(
                "memcpy penalty must lie in [1, dma/stream] so staged modes "
                "never lose to un-staged streaming")
        if self.invocation_us[0] < 0 or self.invocation_us[1] < self.invocation_us[0]:
            raise InputError("invocation range must satisfy 0 <= lo <= hi")

    def sample_invocation_us(self, rng: np.random.Generator) -> float:
        lo, hi = self.invocation_us
        return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


@dataclass(frozen=True)
class TilePlan:
    """The staged tile stream of one batch: per-tile flops and bytes."""

    flops: tuple[float, ...]
    bytes: tuple[float, ...]
    rate_gflops: float  # from the heatmap bucket of the enclosing GEMM

    def __post_init__(self):
        if len(self.flops) != len(self.bytes):
            raise ShapeError("flops/bytes length mismatch")
        if self.rate_gflops <= 0:
            raise ShapeError("rate must be positive")


@dataclass
class StagingTrace:
    """Residency instrumentation of one simulated pipeline execution."""

    peak_resident_bytes: float = 0.0
    peak_resident_pairs: int = 0
    events: list = field(default_factory=list)  # (time_us, delta_bytes)


def _per_tile_times(plan: TilePlan, mode: PipelineMode, model: CostModel):
    c = np.asarray(plan.flops, dtype=np.float64) / (plan.rate_gflops * 1e3)
    b = np.asarray(plan.bytes, dtype=np.float64)
    if mode is PipelineMode.BASELINE:
        return c, b / model.stream_bandwidth
    c = c / model.smt_speedup
    if mode is PipelineMode.SMT:
        return c, b / model.stream_bandwidth
    if mode is PipelineMode.TCM_MEMCPY:
        return c, model.memcpy_penalty * b / model.dma_bandwidth
    return c, b / model.dma_bandwidth  # TCM_DMA and DMA_OVERLAP


def pipeline_time_us(plan: TilePlan, mode: PipelineMode, model: CostModel,
                     invocation_us: float,
                     trace: StagingTrace | None = None) -> float:
    """Simulated time of one invocation processing the plan's tile stream."""
    if not plan.flops:
        return invocation_us
    c, t = _per_tile_times(plan, mode, model)
    n = len(c)
    if mode is not PipelineMode.DMA_OVERLAP:
        total = invocation_us + float(np.sum(c) + np.sum(t))
        if trace is not None:
            _sequential_trace(trace, c, t, invocation_us, plan)
        return total
    # Double-buffered overlap: tile i computes while tile i+1 transfers.
    total = invocation_us + t[0] + float(np.sum(np.maximum(c[:-1], t[1:]))) + c[-1]
    if trace is not None:
        _overlap_trace(trace, c, t, invocation_us, plan)
    return total


def _note(trace: StagingTrace, time_us: float, delta: float, resident: list):
    resident[0] += delta
    resident[1] = max(resident[1], resident[0])
    trace.events.append((time_us, delta))


def _sequential_trace(trace, c, t, invocation_us, plan):
    resident = [0.0, 0.0]
    now = invocation_us
    for i in range(len(c)):
        _note(trace, now, plan.bytes[i], resident)
        now += t[i] + c[i]
        _note(trace, now, -plan.bytes[i], resident)
    trace.peak_resident_bytes = resident[1]
    trace.peak_resident_pairs = 1 if len(c) else 0


def _overlap_trace(trace, c, t, invocation_us, plan):
    # Event times follow the closed-form recurrence: transfer i+1 may start
    # once tile i-1's slot is free; compute i starts when its transfer and
    # the previous compute are both done.
    n = len(c)
    transfer_done = np.zeros(n)
    compute_done = np.zeros(n)
    transfer_start = np.zeros(n)
    transfer_start[0] = invocation_us
    transfer_done[0] = invocation_us + t[0]
    prev_compute = invocation_us
    for i in range(n):
        if i > 0:
            slot_free = compute_done[i - 2] if i >= 2 else invocation_us
            transfer_start[i] = max(transfer_done[i - 1], slot_free)
            transfer_done[i] = transfer_start[i] + t[i]
        start = max(transfer_done[i], prev_compute)
        compute_done[i] = start + c[i]
        prev_compute = compute_done[i]
    events = []
    for i in range(n):
        events.append((transfer_start[i], plan.bytes[i]))
        events.append((compute_done[i], -plan.bytes[i]))
    # At equal timestamps the freeing compute precedes the slot's refill
    # (that is the happens-before edge of the double buffer).
    events.sort(key=lambda e: (e[0], e[1]))
    resident = [0.0, 0.0]
    pairs = peak_pairs = 0
    for time_us, delta in events:
        _note(trace, time_us, delta, resident)
        pairs += 1 if delta > 0 else -1
        peak_pairs = max(peak_pairs, pairs)
    trace.peak_resident_bytes = resident[1]
    trace.peak_resident_pairs = peak_pairs
