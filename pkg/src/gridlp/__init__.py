"""gridlp: a restarted-Halpern primal-dual LP solver that partitions the
constraint matrix over a simulated 2D device grid, with block-wise random
permutation and nonzero-balanced cuts for load balance, verified against a
single-device reference oracle."""

from .bench import ExperimentPlan, instances_from_specs, run_matrix_experiment, sgm10
from .comm import Axis, Communicator, SimulatedGrid
from .generators import GeneratorSpec, box_lp_optimum, generate
from .lp_model import (
    LpProblem,
    MpsParseError,
    SparseMatrix,
    load_mps,
    objective_value,
    parse_mps,
    write_mps,
)
from .partition import (
    GridTopology,
    LocalBlock,
    PartitionLayout,
    Permutation,
    block_random_permutation,
    build_layout,
    distribute,
    layout_summary,
    nnz_balanced_cuts,
    select_grid,
    unpermute_solution,
)
from .pdhg_engine import KktReport, StepSizes
from .solver_driver import SolveResult, SolverConfig, reference_solve, solve

__version__ = "0.1.0"

__all__ = [
    "Axis",
    "Communicator",
    "ExperimentPlan",
    "GeneratorSpec",
    "GridTopology",
    "KktReport",
    "LocalBlock",
    "LpProblem",
    "MpsParseError",
    "PartitionLayout",
    "Permutation",
    "SimulatedGrid",
    "SolveResult",
    "SolverConfig",
    "SparseMatrix",
    "StepSizes",
    "block_random_permutation",
    "box_lp_optimum",
    "build_layout",
    "distribute",
    "generate",
    "instances_from_specs",
    "layout_summary",
    "load_mps",
    "nnz_balanced_cuts",
    "objective_value",
    "parse_mps",
    "reference_solve",
    "run_matrix_experiment",
    "select_grid",
    "sgm10",
    "solve",
    "unpermute_solution",
    "write_mps",
]
