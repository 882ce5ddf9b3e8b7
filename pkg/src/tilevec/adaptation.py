"""Operand adaptation kernels: narrowing + tile packing, unpacking, transpose.

These are the software equivalents of the accelerator-side vector-unit
transforms: fp32 row-major data is narrowed to fp16 and laid out tile-major
for the matrix engine, and results come back the other way.  The in-place
transpose reorders a tile-major buffer into its transpose within the same
allocation, touching at most one tile of scratch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .buffers import (FP16, FP32, MAX_BUFFER_BYTES, MatrixBuffer, TileMajor,
                      TileSpec, alloc_array, dtype_of, round_up)
from .errors import CapacityError, ShapeError
from .fp16 import CANONICAL_QNAN16


@dataclass(frozen=True)
class PackDescriptor:
    """What to pack: an fp32 row-major source into fp16 tile-major form.

    ``operand`` selects the tile footprint: 'a' uses (m_tile x k_tile) tiles,
    'b' uses (k_tile x n_tile); an explicit ``shape`` overrides the role.
    With ``transpose`` the packed output represents the transposed source.
    """

    source: MatrixBuffer
    target_spec: TileSpec
    transpose: bool = False
    operand: str = "a"
    shape: TileMajor | None = None

    def tile_shape(self) -> TileMajor:
        if self.shape is not None:
            return self.shape
        if self.operand == "a":
            return self.target_spec.a_tile
        if self.operand == "b":
            return self.target_spec.b_tile
        raise ShapeError(f"unknown operand role {self.operand!r}")


def _narrow_with_canonical_nan(matrix: np.ndarray) -> np.ndarray:
    out = matrix.astype(np.float16)
    nan = np.isnan(out)
    if np.any(nan):
        out[nan] = CANONICAL_QNAN16.view(np.float16)
    return out


def pack_fp16_tile_major(desc: PackDescriptor) -> MatrixBuffer:
    """Narrow an fp32 row-major matrix to fp16 and pack it tile-major.

    Output dims are the (optionally transposed) source dims rounded up to
    tile multiples; padding cells are +0.0.
    """
    src = desc.source
    if src.element_type != FP32 or src.is_tile_major:
        raise ShapeError("pack source must be fp32 row-major")
    work = src.as_matrix()[:src.logical_rows, :src.logical_cols]
    if desc.transpose:
        work = work.T
    r, c = work.shape
    shape = desc.tile_shape()
    pr, pc = round_up(r, shape.tile_rows), round_up(c, shape.tile_cols)
    if pr * pc * dtype_of(FP16).itemsize > MAX_BUFFER_BYTES:
        raise CapacityError(f"packed {pr}x{pc} exceeds max buffer size")

    out = MatrixBuffer.alloc(pr, pc, FP16, shape, logical_rows=r, logical_cols=c)
    padded = np.zeros((pr, pc), dtype=np.float16)
    padded[:r, :c] = _narrow_with_canonical_nan(np.ascontiguousarray(work))
    tv = out.tile_view()
    gr, gc = out.tile_grid()
    tv[...] = padded.reshape(gr, shape.tile_rows, gc, shape.tile_cols).transpose(0, 2, 1, 3)
    return out


def unpack_fp32_row_major(m: MatrixBuffer, logical_rows: int | None = None,
                          logical_cols: int | None = None) -> MatrixBuffer:
    """Widen a tile-major fp16 buffer back to a row-major fp32 matrix."""
    if m.element_type != FP16 or not m.is_tile_major:
        raise ShapeError("unpack source must be fp16 tile-major")
    lr = m.logical_rows if logical_rows is None else logical_rows
    lc = m.logical_cols if logical_cols is None else logical_cols
    if lr > m.rows or lc > m.cols:
        raise ShapeError(f"logical dims {lr}x{lc} exceed padded {m.rows}x{m.cols}")
    tv = m.tile_view()
    gr, gc = m.tile_grid()
    full = tv.transpose(0, 2, 1, 3).reshape(m.rows, m.cols)
    out = MatrixBuffer.alloc(lr, lc, FP32)
    out.as_matrix()[...] = full[:lr, :lc].astype(np.float32)
    return out


def transpose_tiles_in_place(m: MatrixBuffer) -> MatrixBuffer:
    """Transpose a tile-major buffer within its own allocation.

    Two passes over the same flat storage: each tile's contents are
    transposed in its slot, then tile slots are permuted along the cycles of
    the grid transpose.  The tile footprint swaps (r x c tiles become
    c x r tiles), so any tile-aligned geometry is transpose-compatible.
    Scratch is exactly one tile.
    """
    if not m.is_tile_major:
        raise ShapeError("in-place transpose requires a tile-major buffer")
    t = m.tiling
    gr, gc = m.tile_grid()
    slots = m.data.reshape(gr * gc, t.elements)
    scratch = alloc_array(t.elements, m.element_type, kind="scratch")

    # Pass 1: transpose each tile's contents within its slot.
    sc2d = scratch.reshape(t.tile_cols, t.tile_rows)
    for s in range(gr * gc):
        sc2d[...] = slots[s].reshape(t.tile_rows, t.tile_cols).T
        slots[s] = scratch

    # Pass 2: permute slots along the cycles of the (gr x gc) grid transpose.
    # Slot (i, j) must land at grid position (j, i) of the (gc x gr) output.
    total = gr * gc
    moved = bytearray(total)
    for start in range(total):
        if moved[start]:
            continue
        # src(pos) = slot whose content belongs at pos after transposing.
        src = (start % gr) * gc + start // gr
        if src == start:
            moved[start] = 1
            continue
        scratch[...] = slots[start]
        cur = start
        while src != start:
            slots[cur] = slots[src]
            moved[cur] = 1
            cur = src
            src = (cur % gr) * gc + cur // gr
        slots[cur] = scratch
        moved[cur] = 1

    return MatrixBuffer(m.cols, m.rows, m.element_type, m.data, t.swapped(),
                        m.logical_cols, m.logical_rows)
