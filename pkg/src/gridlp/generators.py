"""Synthetic LP instance generators.

Structured kinds (block_diagonal, staircase) emulate the sparsity archetypes
that defeat naive grid partitioning; uniform_random gives unstructured
fill; box_lp_known_optimum produces constraint-free box problems whose
optimum is analytic, for exact-objective checks.

Instances with constraints are built feasible and bounded by construction:
variables live in a finite box, equality rows pin A @ x_hat for an interior
x_hat, and an optional fraction of rows is relaxed to finite ranges around
that value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lp_model import LpProblem, SparseMatrix
from .sparse_kernels import spmv

KINDS = ("block_diagonal", "staircase", "uniform_random", "box_lp_known_optimum")


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str
    num_blocks: int = 4
    block_rows: int = 8
    block_cols: int = 8
    overlap: int = 0
    num_rows: int | None = None       # uniform_random / box kinds
    num_cols: int | None = None
    nnz_target: int | None = None
    inequality_fraction: float = 0.0  # rows widened to finite ranges
    box_low: float = 0.0
    box_high: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.box_low >= self.box_high:
            raise ValueError("box_low must be below box_high")
        if self.overlap < 0:
            raise ValueError("overlap must be non-negative")
        if not 0.0 <= self.inequality_fraction <= 1.0:
            raise ValueError("inequality_fraction must be in [0, 1]")


def generate(spec: GeneratorSpec) -> LpProblem:
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "box_lp_known_optimum":
        return _box_lp(spec, rng)
    if spec.kind == "block_diagonal":
        matrix = _block_diagonal_matrix(spec, rng)
    elif spec.kind == "staircase":
        matrix = _staircase_matrix(spec, rng)
    else:
        matrix = _uniform_matrix(spec, rng)
    return _wrap_feasible(spec, matrix, rng)


def _sample_cells(rng, rows, cols, count, row_off=0, col_off=0):
    cells = rows * cols
    if count > cells:
        raise ValueError(f"cannot place {count} nonzeros in a {rows}x{cols} region")
    flat = rng.choice(cells, size=count, replace=False)
    return flat // cols + row_off, flat % cols + col_off


def _block_diagonal_matrix(spec, rng) -> SparseMatrix:
    nb, br, bc = spec.num_blocks, spec.block_rows, spec.block_cols
    m, n = nb * br, nb * bc
    per_block = _per_region_nnz(spec.nnz_target, nb, br * bc)
    rows, cols, vals = [], [], []
    for b in range(nb):
        r, c = _sample_cells(rng, br, bc, per_block, b * br, b * bc)
        rows.append(r)
        cols.append(c)
        vals.append(rng.standard_normal(per_block))
    return SparseMatrix.from_coo(
        m, n, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    )


def _staircase_matrix(spec, rng) -> SparseMatrix:
    nb, br, bc = spec.num_blocks, spec.block_rows, spec.block_cols
    m, n = nb * br, nb * bc
    rows, cols, vals = [], [], []
    for b in range(nb):
        width = min(bc + spec.overlap, n - b * bc)
        count = _per_region_nnz(spec.nnz_target, nb, br * width)
        r, c = _sample_cells(rng, br, width, count, b * br, b * bc)
        rows.append(r)
        cols.append(c)
        vals.append(rng.standard_normal(count))
    return SparseMatrix.from_coo(
        m, n, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    )


def _uniform_matrix(spec, rng) -> SparseMatrix:
    m = spec.num_rows if spec.num_rows is not None else spec.num_blocks * spec.block_rows
    n = spec.num_cols if spec.num_cols is not None else spec.num_blocks * spec.block_cols
    count = spec.nnz_target if spec.nnz_target is not None else max((m * n) // 5, 1)
    rows, cols = _sample_cells(rng, m, n, count)
    return SparseMatrix.from_coo(m, n, rows, cols, rng.standard_normal(count))


def _per_region_nnz(nnz_target, regions, cells) -> int:
    count = cells // 5 if nnz_target is None else -(-nnz_target // regions)
    count = max(count, 1)
    if count > cells:
        raise ValueError(f"nnz_target needs {count} entries per region of {cells} cells")
    return count


def _wrap_feasible(spec, matrix: SparseMatrix, rng) -> LpProblem:
    m, n = matrix.shape
    lo, hi = spec.box_low, spec.box_high
    margin = 0.25 * (hi - lo)
    x_hat = rng.uniform(lo + margin, hi - margin, size=n)
    rhs = spmv(matrix, x_hat)
    con_lower = rhs.copy()
    con_upper = rhs.copy()
    if spec.inequality_fraction > 0.0 and m > 0:
        count = int(round(spec.inequality_fraction * m))
        picked = rng.choice(m, size=count, replace=False)
        slack = rng.uniform(0.1, 1.0, size=(2, count))
        con_lower[picked] -= slack[0]
        con_upper[picked] += slack[1]
    return LpProblem(
        matrix=matrix,
        objective=rng.standard_normal(n),
        var_lower=np.full(n, lo),
        var_upper=np.full(n, hi),
        con_lower=con_lower,
        con_upper=con_upper,
        name=f"{spec.kind}-{spec.seed}",
    )


def _box_lp(spec, rng) -> LpProblem:
    n = spec.num_cols if spec.num_cols is not None else spec.num_blocks * spec.block_cols
    signs = rng.choice([-1.0, 1.0], size=n)
    c = signs * rng.uniform(0.5, 2.0, size=n)
    return LpProblem(
        matrix=SparseMatrix.from_coo(0, n, [], [], []),
        objective=c,
        var_lower=np.full(n, spec.box_low),
        var_upper=np.full(n, spec.box_high),
        con_lower=np.empty(0),
        con_upper=np.empty(0),
        name=f"box-{spec.seed}",
    )


def box_lp_optimum(problem: LpProblem) -> float:
    """Analytic optimum of a constraint-free box LP: each variable sits at
    the bound its cost sign selects."""
    if problem.num_constraints != 0:
        raise ValueError("analytic box optimum requires a constraint-free problem")
    x = np.where(problem.objective > 0, problem.var_lower, problem.var_upper)
    return float(np.dot(problem.objective, x) + problem.objective_constant)
