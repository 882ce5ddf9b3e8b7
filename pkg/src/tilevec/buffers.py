"""Tile geometry, matrix buffers, and allocation accounting.

A MatrixBuffer owns a flat element array in either row-major or tile-major
order.  Tile-major storage keeps fixed-size (tile_rows x tile_cols)
sub-matrices contiguous: tiles are ordered row-major over the tile grid and
elements row-major within each tile.  All engine-visible payload and scratch
allocations flow through :func:`alloc_array` so tests can assert copy-free
behavior and scratch budgets.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CapacityError, ShapeError

# Upper bound for any single engine allocation; pack/unpack reject padded
# shapes that would exceed it.
MAX_BUFFER_BYTES = 1 << 30

FP32 = "fp32"
FP16 = "fp16"

_DTYPES = {FP32: np.dtype(np.float32), FP16: np.dtype(np.float16)}


def dtype_of(element_type: str) -> np.dtype:
    try:
        return _DTYPES[element_type]
    except KeyError:
        raise ShapeError(f"unknown element type {element_type!r}") from None


def round_up(value: int, quantum: int) -> int:
    return -(-value // quantum) * quantum


@dataclass(frozen=True)
class TileSpec:
    """GEMM tile granularity: M x N x K elements per minimum kernel."""

    m_tile: int = 32
    n_tile: int = 64
    k_tile: int = 64

    def __post_init__(self):
        if min(self.m_tile, self.n_tile, self.k_tile) < 1:
            raise ShapeError(f"tile dims must be >= 1, got {self}")

    def aligned(self, rows: int, cols: int, tiling: "TileMajor") -> bool:
        return rows % tiling.tile_rows == 0 and cols % tiling.tile_cols == 0

    @property
    def a_tile(self) -> "TileMajor":
        """Tile footprint for the left (query/update rows) operand."""
        return TileMajor(self.m_tile, self.k_tile)

    @property
    def b_tile(self) -> "TileMajor":
        """Tile footprint for the right (database) operand."""
        return TileMajor(self.k_tile, self.n_tile)

    def pair_bytes(self) -> int:
        """Bytes of one staged fp16 tile pair (one A tile + one B tile)."""
        return 2 * (self.m_tile * self.k_tile + self.k_tile * self.n_tile)


DEFAULT_TILE_SPEC = TileSpec()


@dataclass(frozen=True)
class TileMajor:
    """Tile-major layout marker: the 2-D footprint of one tile."""

    tile_rows: int
    tile_cols: int

    def __post_init__(self):
        if min(self.tile_rows, self.tile_cols) < 1:
            raise ShapeError(f"tile footprint must be >= 1, got {self}")

    @property
    def elements(self) -> int:
        return self.tile_rows * self.tile_cols

    def swapped(self) -> "TileMajor":
        return TileMajor(self.tile_cols, self.tile_rows)


class AllocationStats:
    """Thread-safe counters over engine buffer allocations."""

    def __init__(self):
        self._lock = threading.Lock()
        self.payload_allocs = 0
        self.payload_bytes = 0
        self.scratch_allocs = 0
        self.scratch_bytes = 0

    def record(self, nbytes: int, kind: str):
        with self._lock:
            if kind == "scratch":
                self.scratch_allocs += 1
                self.scratch_bytes += nbytes
            else:
                self.payload_allocs += 1
                self.payload_bytes += nbytes

    def snapshot(self) -> tuple[int, int, int, int]:
        with self._lock:
            return (self.payload_allocs, self.payload_bytes,
                    self.scratch_allocs, self.scratch_bytes)


ALLOC_STATS = AllocationStats()


class AllocationRecorder:
    """Deltas of the global counters since construction (for tests)."""

    def __init__(self):
        self._base = ALLOC_STATS.snapshot()

    def _delta(self, i: int) -> int:
        return ALLOC_STATS.snapshot()[i] - self._base[i]

    @property
    def payload_allocs(self) -> int:
        return self._delta(0)

    @property
    def payload_bytes(self) -> int:
        return self._delta(1)

    @property
    def scratch_allocs(self) -> int:
        return self._delta(2)

    @property
    def scratch_bytes(self) -> int:
        return self._delta(3)


def alloc_array(n_elements: int, element_type: str, kind: str = "payload") -> np.ndarray:
    dtype = dtype_of(element_type)
    nbytes = n_elements * dtype.itemsize
    if nbytes > MAX_BUFFER_BYTES:
        raise CapacityError(
            f"allocation of {nbytes} bytes exceeds max buffer size {MAX_BUFFER_BYTES}")
    ALLOC_STATS.record(nbytes, kind)
    return np.zeros(n_elements, dtype=dtype)


@dataclass
class MatrixBuffer:
    """A 2-D matrix over a flat element array.

    ``rows``/``cols`` are the padded (storage) dims; ``logical_rows`` and
    ``logical_cols`` are the pre-padding dims.  Padded cells are always zero.
    """

    rows: int
    cols: int
    element_type: str
    data: np.ndarray
    tiling: TileMajor | None = None  # None means row-major
    logical_rows: int = field(default=-1)
    logical_cols: int = field(default=-1)

    def __post_init__(self):
        if self.logical_rows < 0:
            self.logical_rows = self.rows
        if self.logical_cols < 0:
            self.logical_cols = self.cols
        if self.data.size != self.rows * self.cols:
            raise ShapeError(
                f"data length {self.data.size} != {self.rows}x{self.cols}")
        if self.data.dtype != dtype_of(self.element_type):
            raise ShapeError(
                f"dtype {self.data.dtype} does not match {self.element_type}")
        if self.tiling is not None:
            if self.rows % self.tiling.tile_rows or self.cols % self.tiling.tile_cols:
                raise ShapeError(
                    f"{self.rows}x{self.cols} not aligned to tiles {self.tiling}")
        if not (0 <= self.logical_rows <= self.rows and 0 <= self.logical_cols <= self.cols):
            raise ShapeError("logical dims exceed padded dims")

    @classmethod
    def alloc(cls, rows: int, cols: int, element_type: str,
              tiling: TileMajor | None = None,
              logical_rows: int | None = None,
              logical_cols: int | None = None) -> "MatrixBuffer":
        data = alloc_array(rows * cols, element_type)
        return cls(rows, cols, element_type, data, tiling,
                   rows if logical_rows is None else logical_rows,
                   cols if logical_cols is None else logical_cols)

    @classmethod
    def from_array(cls, matrix: np.ndarray) -> "MatrixBuffer":
        """Wrap a 2-D fp32 array as a row-major buffer (copies if needed)."""
        m = np.ascontiguousarray(matrix, dtype=np.float32)
        if m.ndim != 2:
            raise ShapeError(f"expected 2-D matrix, got shape {m.shape}")
        if m is not matrix:
            ALLOC_STATS.record(m.nbytes, "payload")
        return cls(m.shape[0], m.shape[1], FP32, m.reshape(-1))

    @property
    def is_tile_major(self) -> bool:
        return self.tiling is not None

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def as_matrix(self) -> np.ndarray:
        """Row-major 2-D view (row-major buffers only)."""
        if self.tiling is not None:
            raise ShapeError("tile-major buffer has no row-major view")
        return self.data.reshape(self.rows, self.cols)

    def tile_grid(self) -> tuple[int, int]:
        if self.tiling is None:
            raise ShapeError("row-major buffer has no tile grid")
        return self.rows // self.tiling.tile_rows, self.cols // self.tiling.tile_cols

    def tile_view(self) -> np.ndarray:
        """Zero-copy (grid_rows, grid_cols, tile_rows, tile_cols) view."""
        gr, gc = self.tile_grid()
        t = self.tiling
        return self.data.reshape(gr * gc, t.tile_rows, t.tile_cols).reshape(
            gr, gc, t.tile_rows, t.tile_cols)

    def row_band(self, tile_row_start: int, tile_row_stop: int) -> "MatrixBuffer":
        """Zero-copy sub-buffer spanning whole tile rows [start, stop)."""
        gr, gc = self.tile_grid()
        if not 0 <= tile_row_start < tile_row_stop <= gr:
            raise ShapeError(f"tile row band [{tile_row_start}, {tile_row_stop}) out of range")
        t = self.tiling
        per_band = gc * t.elements
        data = self.data[tile_row_start * per_band:tile_row_stop * per_band]
        rows = (tile_row_stop - tile_row_start) * t.tile_rows
        lo = tile_row_start * t.tile_rows
        logical = min(max(self.logical_rows - lo, 0), rows)
        return MatrixBuffer(rows, self.cols, self.element_type, data, t,
                            logical, self.logical_cols)

    def element(self, i: int, j: int) -> float:
        """Logical element accessor working for either layout (test aid)."""
        if not (0 <= i < self.rows and 0 <= j < self.cols):
            raise ShapeError(f"({i}, {j}) outside {self.rows}x{self.cols}")
        if self.tiling is None:
            return float(self.data[i * self.cols + j])
        t = self.tiling
        _, gc = self.tile_grid()
        slot = (i // t.tile_rows) * gc + (j // t.tile_cols)
        off = slot * t.elements + (i % t.tile_rows) * t.tile_cols + (j % t.tile_cols)
        return float(self.data[off])

    def with_dims(self, **changes) -> "MatrixBuffer":
        return replace(self, **changes)
