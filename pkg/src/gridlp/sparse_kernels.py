"""Sequential sparse linear-algebra primitives shared by every device worker.

All products route through scipy's CSR kernels, which accumulate each row
strictly left to right in index order, so repeated runs are bit-identical.
All arithmetic is FP64.
"""

from __future__ import annotations

import math

import numpy as np

from .comm import Axis
from .lp_model import SparseMatrix


def spmv(matrix: SparseMatrix, x: np.ndarray) -> np.ndarray:
    """A @ x with deterministic left-to-right per-row accumulation."""
    if x.shape != (matrix.num_cols,):
        raise ValueError(
            f"vector has length {x.shape[0]}, expected {matrix.num_cols}"
        )
    return matrix.as_scipy().dot(x)


def transpose(matrix: SparseMatrix) -> SparseMatrix:
    """Explicit CSR transpose, cached on the matrix so both product
    orientations traverse row-major."""
    if matrix._tr is None:
        t = matrix.as_scipy().T.tocsr()
        t.sort_indices()
        matrix._tr = SparseMatrix(
            matrix.num_cols, matrix.num_rows, t.indptr, t.indices, t.data
        )
    return matrix._tr


def spmv_transpose(matrix: SparseMatrix, y: np.ndarray) -> np.ndarray:
    """A' @ y, computed through an explicitly materialized transpose."""
    if y.shape != (matrix.num_rows,):
        raise ValueError(
            f"vector has length {y.shape[0]}, expected {matrix.num_rows}"
        )
    return spmv(transpose(matrix), y)


def slice_block(matrix: SparseMatrix, row_range, col_range) -> SparseMatrix:
    """Submatrix over [lo, hi) ranges, reindexed to local coordinates."""
    r0, r1 = row_range
    c0, c1 = col_range
    if not (0 <= r0 <= r1 <= matrix.num_rows):
        raise ValueError(f"row range [{r0}, {r1}) outside [0, {matrix.num_rows})")
    if not (0 <= c0 <= c1 <= matrix.num_cols):
        raise ValueError(f"col range [{c0}, {c1}) outside [0, {matrix.num_cols})")
    sub = matrix.as_scipy()[r0:r1, c0:c1].tocsr()
    sub.sort_indices()
    return SparseMatrix(r1 - r0, c1 - c0, sub.indptr, sub.indices, sub.data)


def estimate_spectral_norm(
    block: SparseMatrix,
    block_transpose: SparseMatrix,
    comm,
    iters: int,
    v0_local: np.ndarray,
) -> float:
    """Power-iteration estimate of the full matrix 2-norm, computed with the
    same distributed products and reductions as the main loop.

    `block` is this device's slice, `v0_local` this device's primal-axis
    slice of the (shared) start vector. The returned Rayleigh estimate never
    exceeds the true norm and is identical on every device.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rows = float(comm.topology.rows)
    cols = float(comm.topology.cols)
    v = np.asarray(v0_local, dtype=np.float64)
    estimate = 0.0
    for _ in range(iters):
        u = comm.allreduce_sum(Axis.C, spmv(block, v))
        u_sq = comm.allreduce_sum_scalar(Axis.G, float(np.dot(u, u)) / cols)
        v_sq = comm.allreduce_sum_scalar(Axis.G, float(np.dot(v, v)) / rows)
        if u_sq == 0.0 or v_sq == 0.0:
            return 0.0
        estimate = math.sqrt(u_sq / v_sq)
        s = comm.allreduce_sum(Axis.R, spmv(block_transpose, u))
        s_sq = comm.allreduce_sum_scalar(Axis.G, float(np.dot(s, s)) / rows)
        if s_sq == 0.0:
            return estimate
        v = s / math.sqrt(s_sq)
    return estimate


def estimate_spectral_norm_dense(matrix: SparseMatrix, iters: int, v0: np.ndarray) -> float:
    """Single-device twin of estimate_spectral_norm (no communicator).

    Mirrors the distributed arithmetic exactly so a 1x1 grid reproduces it
    bit for bit.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    matrix_t = transpose(matrix)
    v = np.asarray(v0, dtype=np.float64)
    estimate = 0.0
    for _ in range(iters):
        u = spmv(matrix, v)
        u_sq = float(np.dot(u, u)) / 1.0
        v_sq = float(np.dot(v, v)) / 1.0
        if u_sq == 0.0 or v_sq == 0.0:
            return 0.0
        estimate = math.sqrt(u_sq / v_sq)
        s = spmv(matrix_t, u)
        s_sq = float(np.dot(s, s)) / 1.0
        if s_sq == 0.0:
            return estimate
        v = s / math.sqrt(s_sq)
    return estimate
