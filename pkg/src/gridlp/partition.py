"""Layout construction: grid topology selection, block-wise random
permutation, nonzero-balanced boundary cuts, and per-device block extraction.

A layout maps the global problem to device-local index space. Primal-side
data (objective and variable-bound slices) is replicated down each grid
column; dual-side data (constraint-bound slices) is replicated across each
grid row. Every LocalBlock owns private copies of its slices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lp_model import LpProblem, SparseMatrix
from .sparse_kernels import slice_block, transpose

PERMUTATIONS = ("none", "full_random", "block_random")
PARTITIONINGS = ("uniform", "nnz")


@dataclass(frozen=True)
class GridTopology:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid dimensions must be positive")

    @property
    def num_devices(self) -> int:
        return self.rows * self.cols

    def coords(self):
        return [(i, j) for i in range(self.rows) for j in range(self.cols)]


@dataclass(frozen=True)
class Permutation:
    """Row/column bijections; perm[k] is the source index placed at k."""

    row_perm: np.ndarray
    col_perm: np.ndarray
    block_size: int
    seed: int

    def __post_init__(self):
        for name in ("row_perm", "col_perm"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            object.__setattr__(self, name, arr)
            arr.setflags(write=False)

    def inverse_rows(self) -> np.ndarray:
        return invert_permutation(self.row_perm)

    def inverse_cols(self) -> np.ndarray:
        return invert_permutation(self.col_perm)


@dataclass(frozen=True)
class PartitionLayout:
    topology: GridTopology
    perm: Permutation
    row_cuts: np.ndarray   # length rows+1, row_cuts[0]=0, row_cuts[-1]=m
    col_cuts: np.ndarray   # length cols+1

    def __post_init__(self):
        for name, parts in (("row_cuts", self.topology.rows), ("col_cuts", self.topology.cols)):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            if arr.shape != (parts + 1,) or arr[0] != 0 or np.any(np.diff(arr) < 0):
                raise ValueError(f"{name} must be non-decreasing with {parts + 1} entries from 0")
            object.__setattr__(self, name, arr)
            arr.setflags(write=False)

    @property
    def num_rows(self) -> int:
        return int(self.row_cuts[-1])

    @property
    def num_cols(self) -> int:
        return int(self.col_cuts[-1])

    def row_range(self, i) -> tuple[int, int]:
        return int(self.row_cuts[i]), int(self.row_cuts[i + 1])

    def col_range(self, j) -> tuple[int, int]:
        return int(self.col_cuts[j]), int(self.col_cuts[j + 1])


@dataclass(frozen=True)
class LocalBlock:
    """One device's slice of the permuted problem."""

    coord: tuple[int, int]
    matrix: SparseMatrix            # m_i x n_j
    matrix_transpose: SparseMatrix  # n_j x m_i
    objective: np.ndarray           # n_j
    var_lower: np.ndarray
    var_upper: np.ndarray
    con_lower: np.ndarray           # m_i
    con_upper: np.ndarray

    def __post_init__(self):
        for name in ("objective", "var_lower", "var_upper", "con_lower", "con_upper"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, arr)
            arr.setflags(write=False)
        if self.objective.shape != (self.matrix.num_cols,):
            raise ValueError("objective slice does not match block width")
        if self.con_lower.shape != (self.matrix.num_rows,):
            raise ValueError("constraint-bound slice does not match block height")

    @property
    def num_rows(self) -> int:
        return self.matrix.num_rows

    @property
    def num_cols(self) -> int:
        return self.matrix.num_cols


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm), dtype=perm.dtype)
    return inv


def select_grid(m: int, n: int, n_procs: int) -> GridTopology:
    """Pick grid dimensions: use as many devices as possible, then match the
    grid aspect ratio to m/n in log space; ties go to the taller grid."""
    if n_procs < 1:
        raise ValueError("n_procs must be >= 1")
    max_rows = max(min(n_procs, m), 1)
    max_cols = max(min(n_procs, n), 1)
    target = math.log(max(m, 1) / max(n, 1))
    best = None
    for rows in range(1, max_rows + 1):
        cols = min(n_procs // rows, max_cols)
        if cols < 1:
            continue
        usage = rows * cols
        distance = abs(math.log(rows / cols) - target)
        # maximize usage, then minimize aspect distance, then prefer more rows
        key = (-usage, distance, -rows)
        if best is None or key < best[0]:
            best = (key, GridTopology(rows, cols))
    return best[1]


def block_random_permutation(length: int, block_size: int, seed: int) -> np.ndarray:
    """Shuffle contiguous index blocks of size block_size (the last block may
    be short), preserving order inside each block. Deterministic per seed."""
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    if length == 0:
        return np.empty(0, dtype=np.int64)
    num_blocks = -(-length // block_size)
    order = np.arange(num_blocks, dtype=np.int64)
    _fisher_yates(order, np.random.default_rng(seed))
    pieces = [
        np.arange(b * block_size, min((b + 1) * block_size, length), dtype=np.int64)
        for b in order
    ]
    return np.concatenate(pieces)


def _fisher_yates(arr: np.ndarray, rng: np.random.Generator):
    for i in range(len(arr) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        arr[i], arr[j] = arr[j], arr[i]


def uniform_cuts(length: int, parts: int) -> np.ndarray:
    """Evenly spread boundaries: cut t sits at ceil(t * length / parts)."""
    _check_parts(length, parts)
    return np.array([-(-t * length // parts) for t in range(parts + 1)], dtype=np.int64)


def nnz_balanced_cuts(counts: np.ndarray, parts: int) -> np.ndarray:
    """Greedy sweep over cumulative counts: place each boundary as soon as the
    running sum reaches the next multiple of total/parts. Every part keeps at
    least one index when possible."""
    counts = np.asarray(counts)
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    length = len(counts)
    _check_parts(length, parts)
    if length == 0:
        return np.zeros(parts + 1, dtype=np.int64)
    total = int(counts.sum())
    cuts = [0]
    running = 0
    idx = 0
    for part in range(1, parts):
        target = total * part / parts
        max_end = length - (parts - part)   # leave an index for each later part
        min_end = cuts[-1] + 1
        while idx < max_end and (idx < min_end or running < target):
            running += int(counts[idx])
            idx += 1
        cuts.append(idx)
    cuts.append(length)
    return np.array(cuts, dtype=np.int64)


def _check_parts(length: int, parts: int):
    if parts < 1:
        raise ValueError("parts must be >= 1")
    if parts > length and not (length == 0 and parts == 1):
        raise ValueError(f"cannot split {length} indices into {parts} non-empty parts")


def build_layout(
    problem: LpProblem,
    n_procs: int,
    block_size: int = 64,
    seed: int = 0,
    permutation: str = "block_random",
    partitioning: str = "nnz",
    grid: GridTopology | None = None,
) -> PartitionLayout:
    """Compose grid selection, the chosen permutation, and boundary cuts."""
    if permutation not in PERMUTATIONS:
        raise ValueError(f"unknown permutation strategy {permutation!r}")
    if partitioning not in PARTITIONINGS:
        raise ValueError(f"unknown partitioning strategy {partitioning!r}")
    m, n = problem.num_constraints, problem.num_variables
    if grid is None:
        grid = select_grid(m, n, n_procs)
    else:
        # shrink so no device gets an empty slice (unless the problem axis is empty)
        grid = GridTopology(max(min(grid.rows, m), 1), max(min(grid.cols, n), 1))

    row_seed, col_seed = _axis_seeds(seed)
    if permutation == "none":
        row_perm = np.arange(m, dtype=np.int64)
        col_perm = np.arange(n, dtype=np.int64)
        effective_b = block_size
    else:
        effective_b = 1 if permutation == "full_random" else block_size
        row_perm = block_random_permutation(m, effective_b, row_seed)
        col_perm = block_random_permutation(n, effective_b, col_seed)
    perm = Permutation(row_perm, col_perm, effective_b, seed)

    if partitioning == "uniform":
        row_cuts = uniform_cuts(m, grid.rows)
        col_cuts = uniform_cuts(n, grid.cols)
    else:
        row_cuts = nnz_balanced_cuts(problem.matrix.row_nnz()[row_perm], grid.rows)
        col_cuts = nnz_balanced_cuts(problem.matrix.col_nnz()[col_perm], grid.cols)
    return PartitionLayout(grid, perm, row_cuts, col_cuts)


def _axis_seeds(seed: int) -> tuple[int, int]:
    state = np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64)
    return int(state[0]), int(state[1])


def permute_problem(problem: LpProblem, perm: Permutation) -> LpProblem:
    """Copy of the problem with rows/columns reordered per the permutation."""
    A = problem.matrix
    m, n = A.shape
    row_perm, col_perm = perm.row_perm, perm.col_perm
    inv_col = perm.inverse_cols()

    lens = A.row_nnz()[row_perm]
    starts = A.row_offsets[:-1][row_perm]
    total = int(lens.sum())
    if total:
        shift = np.cumsum(lens) - lens
        gather = np.repeat(starts - shift, lens) + np.arange(total, dtype=np.int64)
        new_rows = np.repeat(np.arange(m, dtype=np.int64), lens)
        new_cols = inv_col[A.col_indices[gather]]
        new_vals = A.values[gather]
    else:
        new_rows = new_cols = np.empty(0, dtype=np.int64)
        new_vals = np.empty(0)
    matrix = SparseMatrix.from_coo(m, n, new_rows, new_cols, new_vals)

    return LpProblem(
        matrix=matrix,
        objective=problem.objective[col_perm].copy(),
        var_lower=problem.var_lower[col_perm].copy(),
        var_upper=problem.var_upper[col_perm].copy(),
        con_lower=problem.con_lower[row_perm].copy(),
        con_upper=problem.con_upper[row_perm].copy(),
        objective_constant=problem.objective_constant,
        maximize=problem.maximize,
        name=problem.name,
    )


def distribute(problem: LpProblem, layout: PartitionLayout) -> dict:
    """Apply the permutation and slice the problem into per-device blocks.

    Returns {(i, j): LocalBlock}; every block carries its own copies of the
    replicated vector slices and both matrix orientations.
    """
    permuted = permute_problem(problem, layout.perm)
    blocks = {}
    for i in range(layout.topology.rows):
        r0, r1 = layout.row_range(i)
        for j in range(layout.topology.cols):
            c0, c1 = layout.col_range(j)
            sub = slice_block(permuted.matrix, (r0, r1), (c0, c1))
            blocks[(i, j)] = LocalBlock(
                coord=(i, j),
                matrix=sub,
                matrix_transpose=transpose(sub),
                objective=permuted.objective[c0:c1].copy(),
                var_lower=permuted.var_lower[c0:c1].copy(),
                var_upper=permuted.var_upper[c0:c1].copy(),
                con_lower=permuted.con_lower[r0:r1].copy(),
                con_upper=permuted.con_upper[r0:r1].copy(),
            )
    return blocks


def unpermute_solution(layout: PartitionLayout, x_blocks, y_blocks):
    """Concatenate per-device slices and undo the permutation, returning the
    primal/dual vectors in original index order."""
    x_p = np.concatenate([np.asarray(b, dtype=np.float64) for b in x_blocks]) \
        if x_blocks else np.empty(0)
    y_p = np.concatenate([np.asarray(b, dtype=np.float64) for b in y_blocks]) \
        if y_blocks else np.empty(0)
    if x_p.shape != (layout.num_cols,):
        raise ValueError("primal blocks do not cover the column cuts")
    if y_p.shape != (layout.num_rows,):
        raise ValueError("dual blocks do not cover the row cuts")
    x = np.empty_like(x_p)
    y = np.empty_like(y_p)
    x[layout.perm.col_perm] = x_p
    y[layout.perm.row_perm] = y_p
    return x, y


def layout_summary(problem: LpProblem, layout: PartitionLayout) -> dict:
    """Per-device sizes and nonzero counts, JSON-ready."""
    A = problem.matrix
    rows, cols = layout.topology.rows, layout.topology.cols
    if A.nnz:
        inv_row = layout.perm.inverse_rows()
        inv_col = layout.perm.inverse_cols()
        entry_rows = np.repeat(np.arange(A.num_rows, dtype=np.int64), A.row_nnz())
        band_r = np.searchsorted(layout.row_cuts, inv_row[entry_rows], side="right") - 1
        band_c = np.searchsorted(layout.col_cuts, inv_col[A.col_indices], side="right") - 1
        per_device = np.bincount(band_r * cols + band_c, minlength=rows * cols)
    else:
        per_device = np.zeros(rows * cols, dtype=np.int64)

    devices = []
    for i in range(rows):
        r0, r1 = layout.row_range(i)
        for j in range(cols):
            c0, c1 = layout.col_range(j)
            devices.append({
                "i": i,
                "j": j,
                "rows": r1 - r0,
                "cols": c1 - c0,
                "nnz": int(per_device[i * cols + j]),
            })
    nnz_counts = per_device.astype(np.float64)
    mean = float(nnz_counts.mean()) if len(nnz_counts) else 0.0
    return {
        "grid": {"rows": rows, "cols": cols},
        "permutation": {
            "block_size": layout.perm.block_size,
            "seed": layout.perm.seed,
        },
        "total_nnz": int(per_device.sum()),
        "nnz_max": int(nnz_counts.max()) if len(nnz_counts) else 0,
        "nnz_max_over_mean": float(nnz_counts.max() / mean) if mean > 0 else 0.0,
        "devices": devices,
    }
