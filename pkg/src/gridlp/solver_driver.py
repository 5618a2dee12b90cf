"""End-to-end orchestration: build the layout, run one worker per device
coordinate, assemble the global solution, and report statistics.

`solve` drives the simulated grid; `reference_solve` is the single-device
oracle that runs the same algorithm with plain dense reductions and no
communicator. On a 1x1 grid the two produce bit-identical trajectories.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from . import pdhg_engine as engine
from .comm import SimulatedGrid, total_counters
from .lp_model import LpProblem, reported_objective
from .partition import (
    GridTopology,
    build_layout,
    distribute,
    layout_summary,
    unpermute_solution,
)
from .pdhg_engine import (
    EngineConfig,
    KktReport,
    ProblemScalars,
    StepSizes,
    bound_penalty,
    dual_update,
    gap_residual,
    halpern_combine,
    initial_device_state,
    iterate_epoch,
    pid_weight_update,
    primal_update,
    range_violation,
    restart_decision,
)
from .sparse_kernels import (
    estimate_spectral_norm,
    estimate_spectral_norm_dense,
    spmv,
)

log = logging.getLogger("gridlp.solver")

STEP_SIZE_SAFETY = 0.998


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-4
    max_iterations: int = 200_000
    time_limit_seconds: float | None = None
    kkt_interval: int = 64
    block_size: int = 64
    seed: int = 0
    n_procs: int = 1
    grid: tuple[int, int] | None = None
    permutation: str = "block_random"
    partitioning: str = "nnz"
    gamma: float = 0.0
    halpern: bool = True
    restarts: bool = True
    beta_sufficient: float = 0.2
    beta_necessary: float = 0.8
    beta_artificial: float = 0.36
    pid_kp: float = 0.6
    pid_ki: float = 0.1
    pid_kd: float = 0.1
    omega_min: float = 1e-6
    omega_max: float = 1e6
    omega_initial: float | None = None
    eta: float | None = None
    power_iterations: int = 30
    collective_timeout_seconds: float = 120.0
    comm_backend: str = "cooperative"

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.kkt_interval < 1:
            raise ValueError("kkt_interval must be >= 1")
        if self.n_procs < 1:
            raise ValueError("n_procs must be >= 1")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")
        if self.grid is not None:
            rows, cols = self.grid
            if rows < 1 or cols < 1:
                raise ValueError("grid dimensions must be positive")
            if rows * cols > self.n_procs:
                raise ValueError(
                    f"grid {rows}x{cols} needs {rows * cols} devices "
                    f"but n_procs={self.n_procs}"
                )

    def engine_config(self) -> EngineConfig:
        return EngineConfig(
            tolerance=self.tolerance,
            max_iterations=self.max_iterations,
            kkt_interval=self.kkt_interval,
            gamma=self.gamma,
            halpern=self.halpern,
            restarts=self.restarts,
            beta_sufficient=self.beta_sufficient,
            beta_necessary=self.beta_necessary,
            beta_artificial=self.beta_artificial,
            pid_kp=self.pid_kp,
            pid_ki=self.pid_ki,
            pid_kd=self.pid_kd,
            omega_min=self.omega_min,
            omega_max=self.omega_max,
            time_limit_seconds=self.time_limit_seconds,
        )


@dataclass
class SolveResult:
    status: str
    x: np.ndarray
    y: np.ndarray
    report: KktReport
    objective: float            # in the sense the input declared
    iterations: int
    restarts: int
    wall_seconds: float
    counters: dict
    layout: dict

    def to_json_dict(self) -> dict:
        """Stable, timing-free payload (see docs/output.md)."""
        return {
            "status": self.status,
            "objective": self.objective,
            "kkt": self.report.as_dict(),
            "iterations": self.iterations,
            "restarts": self.restarts,
            "counters": self.counters,
            "layout": self.layout,
        }


def problem_scalars(problem: LpProblem) -> ProblemScalars:
    """Static KKT normalizers, computed once from the original ordering so
    every grid shape shares identical values."""
    lc, uc = problem.con_lower, problem.con_upper
    finite_sq = float(np.sum(lc[np.isfinite(lc)] ** 2) + np.sum(uc[np.isfinite(uc)] ** 2))
    return ProblemScalars(
        objective_norm=float(np.linalg.norm(problem.objective)),
        bound_norm=math.sqrt(finite_sq),
        objective_constant=problem.objective_constant,
    )


def _norm_probe_vector(n: int, seed: int) -> np.ndarray:
    """Deterministic start vector for the power iteration, shared by every
    grid shape and the reference engine."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x5eed)))
    return rng.standard_normal(n)


def _initial_omega(cfg: SolverConfig, scalars: ProblemScalars) -> float:
    if cfg.omega_initial is not None:
        return cfg.omega_initial
    if scalars.objective_norm > 0.0 and scalars.bound_norm > 0.0:
        return scalars.objective_norm / scalars.bound_norm
    return 1.0


def _eta_from_estimate(cfg: SolverConfig, estimate: float) -> float:
    if cfg.eta is not None:
        return cfg.eta
    if estimate > 0.0:
        return STEP_SIZE_SAFETY / estimate
    return 1.0


def _log_pass(iteration, report, ss, epoch_n):
    log.info(
        "iter=%d r_primal=%.6e r_dual=%.6e r_gap=%.6e obj_p=%.12e obj_d=%.12e "
        "omega=%.6e eta=%.6e epoch=%d",
        iteration, report.r_primal, report.r_dual, report.r_gap,
        report.obj_primal, report.obj_dual, ss.omega, ss.eta, epoch_n,
    )


def solve(problem: LpProblem, cfg: SolverConfig | None = None) -> SolveResult:
    """Solve on the simulated device grid; deterministic for a fixed
    (problem, config, seed) triple."""
    cfg = cfg or SolverConfig()
    t_start = time.perf_counter()

    grid = GridTopology(*cfg.grid) if cfg.grid is not None else None
    layout = build_layout(
        problem,
        n_procs=cfg.n_procs,
        block_size=cfg.block_size,
        seed=cfg.seed,
        permutation=cfg.permutation,
        partitioning=cfg.partitioning,
        grid=grid,
    )
    blocks = distribute(problem, layout)
    scalars = problem_scalars(problem)
    probe = _norm_probe_vector(problem.num_variables, cfg.seed)
    eng_cfg = cfg.engine_config()
    fabric = SimulatedGrid(
        layout.topology,
        timeout=cfg.collective_timeout_seconds,
        backend=cfg.comm_backend,
    )

    def run_device(comm):
        coord = comm.coord
        blk = blocks[coord]
        c0, c1 = layout.col_range(coord[1])
        estimate = estimate_spectral_norm(
            blk.matrix, blk.matrix_transpose, comm,
            cfg.power_iterations, probe[c0:c1],
        )
        ss = StepSizes(_eta_from_estimate(cfg, estimate), _initial_omega(cfg, scalars))
        setup = comm.counter_snapshot()
        hook = _log_pass if coord == (0, 0) else None
        outcome = iterate_epoch(
            blk, initial_device_state(blk), ss, comm, eng_cfg, scalars,
            log_hook=hook,
        )
        return outcome, setup, comm.counter_snapshot()

    coords = layout.topology.coords()
    raw = fabric.run_workers(run_device)
    outcomes = {c: raw[c][0] for c in coords}
    setup_counts = {c: raw[c][1] for c in coords}
    final_counts = {c: raw[c][2] for c in coords}

    statuses = {o.status for o in outcomes.values()}
    if len(statuses) != 1:
        raise RuntimeError(f"device statuses diverged: {statuses}")

    x_blocks = [outcomes[(0, j)].state.x for j in range(layout.topology.cols)]
    y_blocks = [outcomes[(i, 0)].state.y for i in range(layout.topology.rows)]
    x, y = unpermute_solution(layout, x_blocks, y_blocks)

    lead = outcomes[(0, 0)]
    counters = {
        "setup": _counter_list(setup_counts, coords),
        "total": _counter_list(final_counts, coords),
        "main_loop": _counter_list(
            {c: _diff_counters(final_counts[c], setup_counts[c]) for c in coords},
            coords,
        ),
        "grid_total": total_counters([final_counts[c] for c in coords]),
    }
    objective = reported_objective(problem, lead.report.obj_primal)
    return SolveResult(
        status=lead.status,
        x=x,
        y=y,
        report=lead.report,
        objective=objective,
        iterations=lead.iterations,
        restarts=lead.restarts,
        wall_seconds=time.perf_counter() - t_start,
        counters=counters,
        layout=layout_summary(problem, layout),
    )


def _counter_list(per_coord: dict, coords) -> list[dict]:
    return [{"device": list(c), "axes": per_coord[c]} for c in coords]


def _diff_counters(after: dict, before: dict) -> dict:
    out = {}
    for axis, vals in after.items():
        out[axis] = {k: vals[k] - before[axis][k] for k in vals}
    return out


# ---------------------------------------------------------------------------
# single-device reference oracle (dense reductions, no communicator)
# ---------------------------------------------------------------------------

def reference_solve(
    problem: LpProblem,
    cfg: SolverConfig | None = None,
    trace: list | None = None,
) -> SolveResult:
    """Oracle twin of `solve`: identical algorithm and arithmetic on a single
    device, with every reduction written as plain dense math."""
    cfg = cfg or SolverConfig()
    t_start = time.perf_counter()

    layout = build_layout(
        problem,
        n_procs=1,
        block_size=cfg.block_size,
        seed=cfg.seed,
        permutation=cfg.permutation,
        partitioning=cfg.partitioning,
        grid=GridTopology(1, 1),
    )
    blk = distribute(problem, layout)[(0, 0)]
    scalars = problem_scalars(problem)
    probe = _norm_probe_vector(problem.num_variables, cfg.seed)

    estimate = estimate_spectral_norm_dense(blk.matrix, cfg.power_iterations, probe)
    ss = StepSizes(_eta_from_estimate(cfg, estimate), _initial_omega(cfg, scalars))
    status, report, st, ss, total, restarts = _reference_loop(
        blk, ss, cfg.engine_config(), scalars, trace
    )

    x, y = unpermute_solution(layout, [st.x], [st.y])
    objective = reported_objective(problem, report.obj_primal)
    return SolveResult(
        status=status,
        x=x,
        y=y,
        report=report,
        objective=objective,
        iterations=total,
        restarts=restarts,
        wall_seconds=time.perf_counter() - t_start,
        counters={},
        layout=layout_summary(problem, layout),
    )


def _reference_kkt(blk, st, ss, scalars):
    ax = spmv(blk.matrix, st.x)
    rp_vec = range_violation(ax, blk.con_lower, blk.con_upper)
    r_primal = math.sqrt(float(np.dot(rp_vec, rp_vec))) / (1.0 + scalars.bound_norm)

    aty = spmv(blk.matrix_transpose, st.y)
    shifted = st.x - ss.tau * (blk.objective - aty)
    x_probe = np.clip(shifted, blk.var_lower, blk.var_upper)
    rd_vec = (x_probe - st.x) / ss.tau
    r_dual = math.sqrt(float(np.dot(rd_vec, rd_vec))) / (1.0 + scalars.objective_norm)

    reduced_cost = (x_probe - shifted) / ss.tau
    obj_p = float(np.dot(blk.objective, st.x))
    penalty = bound_penalty(-st.y, blk.con_lower, blk.con_upper)
    obj_d = -penalty + float(np.dot(reduced_cost, st.x))

    report = KktReport(
        r_primal=r_primal,
        r_dual=r_dual,
        r_gap=gap_residual(obj_p, obj_d),
        obj_primal=obj_p + scalars.objective_constant,
        obj_dual=obj_d + scalars.objective_constant,
    )
    return report, ax, x_probe


def _reference_loop(blk, ss, cfg, scalars, trace=None):
    rp = engine.RestartParams(cfg.beta_sufficient, cfg.beta_necessary, cfg.beta_artificial)
    pid = engine.PidState(cfg.pid_kp, cfg.pid_ki, cfg.pid_kd)
    st = initial_device_state(blk)
    started = time.monotonic()
    total = 0
    status = None
    report = None
    report_at = -1

    while True:
        if total >= cfg.max_iterations:
            status = engine.STATUS_ITERATION_LIMIT
            break

        aty = spmv(blk.matrix_transpose, st.y)
        x_hat = primal_update(st.x, blk.objective, aty, ss.tau, blk.var_lower, blk.var_upper)
        z = spmv(blk.matrix, 2.0 * x_hat - st.x)
        y_hat = dual_update(st.y, z, ss.sigma, blk.con_lower, blk.con_upper)
        if cfg.halpern:
            st.x = halpern_combine(x_hat, st.x, st.x_anchor, st.inner_k, cfg.gamma)
            st.y = halpern_combine(y_hat, st.y, st.y_anchor, st.inner_k, cfg.gamma)
        else:
            st.x, st.y = x_hat, y_hat
        st.inner_k += 1
        total += 1
        if trace is not None:
            trace.append((total, st.x.copy(), st.y.copy()))

        if total % cfg.kkt_interval != 0:
            continue

        report, ax, x_probe = _reference_kkt(blk, st, ss, scalars)
        report_at = total
        if engine._report_is_broken(report, report.obj_primal):
            status = engine.STATUS_NUMERICAL_FAILURE
            break
        if report.overall <= cfg.tolerance:
            status = engine.STATUS_OPTIMAL
            break

        if cfg.restarts:
            ax_probe = spmv(blk.matrix, 2.0 * x_probe - st.x)
            y_probe = dual_update(st.y, ax_probe, ss.sigma, blk.con_lower, blk.con_upper)
            dx = st.x - x_probe
            dy = st.y - y_probe
            adx = 0.5 * (ax - ax_probe)
            value = (
                (ss.omega / ss.eta) * float(np.dot(dx, dx))
                + float(np.dot(dy, dy)) / (ss.eta * ss.omega)
                + 2.0 * float(np.dot(adx, dy))
            )
            fp_error = math.sqrt(max(value, 0.0))

            if rp.epoch_initial_fp_error is None:
                rp.epoch_initial_fp_error = fp_error
            if restart_decision(rp, fp_error, rp.last_fp_error, st.inner_k, total):
                d_x = math.sqrt(float(np.dot(st.x - st.x_anchor, st.x - st.x_anchor)))
                d_y = math.sqrt(float(np.dot(st.y - st.y_anchor, st.y - st.y_anchor)))
                new_omega = pid_weight_update(
                    pid, d_x, d_y, ss.omega, cfg.omega_min, cfg.omega_max
                )
                ss = StepSizes(ss.eta, new_omega)
                st.x_anchor = st.x.copy()
                st.y_anchor = st.y.copy()
                st.inner_k = 0
                st.epoch_n += 1
                rp.epoch_initial_fp_error = fp_error
                rp.last_fp_error = None
            else:
                rp.last_fp_error = fp_error

        if cfg.time_limit_seconds is not None:
            if time.monotonic() - started >= cfg.time_limit_seconds:
                status = engine.STATUS_TIME_LIMIT
                break

    if report_at != total:
        report, _, _ = _reference_kkt(blk, st, ss, scalars)
        if status != engine.STATUS_NUMERICAL_FAILURE and engine._report_is_broken(
            report, report.obj_primal
        ):
            status = engine.STATUS_NUMERICAL_FAILURE

    return status, report, st, ss, total, st.epoch_n
