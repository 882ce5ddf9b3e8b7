"""Tiled fp16 GEMM with fp32 accumulation.

The kernel is output-stationary: for every output tile it walks the shared
K dimension in tile-sized chunks, accumulating fp32 partial products.  Each
micro product is a (m_tile x k_tile) @ (k_tile x n_tile) fp32 matmul, so all
micro ops have identical shapes regardless of the enclosing GEMM — the same
logical dot product therefore yields bit-identical fp32 results whether it
is computed inside a flat scan or a per-cluster scan.  All pipeline modes
share this kernel; modes differ only in simulated time.
"""

from __future__ import annotations

import numpy as np

from .buffers import FP16, MatrixBuffer
from .errors import ShapeError


def gemm_tile_major(a: MatrixBuffer, b: MatrixBuffer) -> np.ndarray:
    """Multiply tile-major fp16 operands; returns the padded fp32 result.

    ``a`` is M x K with (m_tile x k_tile) tiles, ``b`` is K x N with
    (k_tile x n_tile) tiles; the K chunk sizes must agree.
    """
    if a.element_type != FP16 or b.element_type != FP16:
        raise ShapeError("gemm operands must be fp16")
    if not (a.is_tile_major and b.is_tile_major):
        raise ShapeError("gemm operands must be tile-major")
    if a.tiling.tile_cols != b.tiling.tile_rows:
        raise ShapeError(
            f"K chunk mismatch: {a.tiling.tile_cols} vs {b.tiling.tile_rows}")
    if a.cols != b.rows:
        raise ShapeError(f"K dims differ: {a.cols} vs {b.rows}")

    gm, gk = a.tile_grid()
    gk2, gn = b.tile_grid()
    assert gk == gk2
    mt, kt = a.tiling.tile_rows, a.tiling.tile_cols
    nt = b.tiling.tile_cols

    # (gk, gm, mt, kt) with contiguous per-chunk blocks.
    a_chunks = np.ascontiguousarray(
        a.tile_view().astype(np.float32).transpose(1, 0, 2, 3))
    b_chunks = b.tile_view().astype(np.float32)  # (gk, gn, kt, nt)

    acc = np.zeros((gm, gn, mt, nt), dtype=np.float32)
    for chunk in range(gk):
        acc += np.matmul(a_chunks[chunk][:, None], b_chunks[chunk][None, :])
    return acc.transpose(0, 2, 1, 3).reshape(a.rows, b.cols)


def gemm_logical(a: MatrixBuffer, b: MatrixBuffer) -> np.ndarray:
    """The kernel result restricted to the operands' logical dims."""
    return gemm_tile_major(a, b)[:a.logical_rows, :b.logical_cols].copy()
