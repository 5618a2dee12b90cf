"""Shared fixtures and independent oracles for the test suite."""

from pathlib import Path

import numpy as np
import pytest

from gridlp import (
    GeneratorSpec,
    GridTopology,
    LpProblem,
    SimulatedGrid,
    SparseMatrix,
    build_layout,
    distribute,
    generate,
)

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture
def toy_mps_path() -> Path:
    return DATA_DIR / "toy3x2.mps"


def random_lp(seed, m=14, n=18, nnz=140, inequality_fraction=0.4) -> LpProblem:
    """Well-conditioned feasible bounded instance for solver-level checks."""
    return generate(GeneratorSpec(
        kind="uniform_random", num_rows=m, num_cols=n, nnz_target=nnz,
        inequality_fraction=inequality_fraction, seed=seed,
    ))


def dense_matrix(rows) -> SparseMatrix:
    return SparseMatrix.from_dense(np.asarray(rows, dtype=np.float64))


def run_on_grid(problem, grid_shape, worker, seed=0, permutation="block_random",
                partitioning="nnz", block_size=64, backend="cooperative"):
    """Distribute `problem` over `grid_shape` and run `worker(blk, comm, layout)`
    on every device; returns ({coord: result}, layout)."""
    layout = build_layout(
        problem, n_procs=grid_shape[0] * grid_shape[1], block_size=block_size,
        seed=seed, permutation=permutation, partitioning=partitioning,
        grid=GridTopology(*grid_shape),
    )
    blocks = distribute(problem, layout)
    fabric = SimulatedGrid(layout.topology, backend=backend)
    results = fabric.run_workers(lambda comm: worker(blocks[comm.coord], comm, layout))
    return results, layout


def dense_kkt_residuals(problem, x, y, tau):
    """Independent dense evaluation of the three relative KKT errors, written
    directly from the termination formulas (no solver imports)."""
    A = problem.matrix.to_dense()
    c = problem.objective
    lc, uc = problem.con_lower, problem.con_upper
    lv, uv = problem.var_lower, problem.var_upper

    ax = A @ x
    primal_violation = ax - np.clip(ax, lc, uc)
    bound_sq = np.sum(lc[np.isfinite(lc)] ** 2) + np.sum(uc[np.isfinite(uc)] ** 2)
    r_primal = np.linalg.norm(primal_violation) / (1.0 + np.sqrt(bound_sq))

    shifted = x - tau * (c - A.T @ y)
    projected = np.clip(shifted, lv, uv)
    r_dual = np.linalg.norm(projected - x) / tau / (1.0 + np.linalg.norm(c))

    s = (projected - shifted) / tau
    neg_y = -y
    pos, neg = np.maximum(neg_y, 0.0), np.maximum(-neg_y, 0.0)
    fin_u, fin_l = np.isfinite(uc), np.isfinite(lc)
    if np.any(pos[~fin_u] > 0) or np.any(neg[~fin_l] > 0):
        penalty = np.inf
    else:
        penalty = float(uc[fin_u] @ pos[fin_u] - lc[fin_l] @ neg[fin_l])
    obj_p = float(c @ x)
    obj_d = -penalty + float(s @ x)
    if not np.isfinite(obj_d):
        r_gap = np.inf
    else:
        r_gap = abs(obj_p - obj_d) / (1.0 + max(abs(obj_p), abs(obj_d)))
    return r_primal, r_dual, r_gap
