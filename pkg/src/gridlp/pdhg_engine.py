"""Per-device iteration body: projected primal/dual updates, anchored
(Halpern) extrapolation, fixed-point-error restarts, PID primal-weight
control, and the distributed KKT evaluation.

Collective budget per device (asserted by the communication-ledger tests):

- main-loop iteration: 1 vector AllReduce on R (gradient) + 1 on C
  (constraint products); the extrapolation step communicates nothing.
- KKT evaluation pass (every kkt_interval iterations): 2 vector AllReduces
  (full Ax on C, full A'y on R) + 5 scalar reductions (primal/dual residual
  norms, objective, bound penalty, reduced-cost dot).
- restart check (same pass, when restart logic is on): 1 more vector
  AllReduce on C for the probe image + 3 scalar reductions on G for the
  metric-norm pieces.
- a triggered restart adds 2 scalar reductions on G (anchor distances);
  a configured time limit adds 1 scalar reduction on G per pass.

Restart and weight decisions are recomputed redundantly on every device from
the reduced scalars, never broadcast.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .comm import Axis
from .partition import LocalBlock
from .sparse_kernels import spmv

STATUS_OPTIMAL = "optimal"
STATUS_ITERATION_LIMIT = "iteration_limit"
STATUS_TIME_LIMIT = "time_limit"
STATUS_NUMERICAL_FAILURE = "numerical_failure"

# vector AllReduces consumed by one evaluation pass, with and without the
# restart probe product
EVAL_VECTOR_ALLREDUCES = 2
RESTART_CHECK_VECTOR_ALLREDUCES = 1
EVAL_SCALAR_ALLREDUCES = 5
RESTART_CHECK_SCALAR_ALLREDUCES = 3
RESTART_APPLY_SCALAR_ALLREDUCES = 2


@dataclass(frozen=True)
class StepSizes:
    """Overall step size and primal weight; tau*sigma == eta**2."""

    eta: float
    omega: float

    def __post_init__(self):
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ValueError("eta must be positive and finite")
        if not (self.omega > 0 and math.isfinite(self.omega)):
            raise ValueError("omega must be positive and finite")

    @property
    def tau(self) -> float:
        return self.eta / self.omega

    @property
    def sigma(self) -> float:
        return self.eta * self.omega


@dataclass
class DeviceState:
    """Per-device iterate blocks and restart-epoch bookkeeping."""

    x: np.ndarray
    y: np.ndarray
    x_anchor: np.ndarray
    y_anchor: np.ndarray
    inner_k: int = 0
    epoch_n: int = 0


@dataclass
class RestartParams:
    beta_sufficient: float = 0.2
    beta_necessary: float = 0.8
    beta_artificial: float = 0.36
    epoch_initial_fp_error: float | None = None
    last_fp_error: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.beta_sufficient <= self.beta_necessary):
            raise ValueError("need 0 <= beta_sufficient <= beta_necessary")
        if self.beta_artificial <= 0:
            raise ValueError("beta_artificial must be positive")


@dataclass
class PidState:
    kp: float = 0.6
    ki: float = 0.1
    kd: float = 0.1
    integral: float = 0.0
    last_error: float = 0.0


@dataclass(frozen=True)
class KktReport:
    r_primal: float
    r_dual: float
    r_gap: float
    obj_primal: float
    obj_dual: float

    @property
    def overall(self) -> float:
        return max(self.r_primal, self.r_dual, self.r_gap)

    def as_dict(self) -> dict:
        return {
            "r_primal": self.r_primal,
            "r_dual": self.r_dual,
            "r_gap": self.r_gap,
            "obj_primal": self.obj_primal,
            "obj_dual": self.obj_dual,
            "overall": self.overall,
        }


@dataclass(frozen=True)
class ProblemScalars:
    """Static normalizers shared by all devices (computed once globally)."""

    objective_norm: float        # ||c||_2
    bound_norm: float            # ||finite entries of [con_lower, con_upper]||_2
    objective_constant: float


@dataclass(frozen=True)
class EngineConfig:
    tolerance: float = 1e-4
    max_iterations: int = 100_000
    kkt_interval: int = 64
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
    time_limit_seconds: float | None = None


@dataclass
class DeviceOutcome:
    status: str
    report: KktReport
    state: DeviceState
    step_sizes: StepSizes
    iterations: int
    restarts: int


# ---------------------------------------------------------------------------
# pure per-block arithmetic (shared with the single-device reference engine)
# ---------------------------------------------------------------------------

def primal_update(x, c, aty, tau, lower, upper):
    """proj onto the variable box of x - tau*(c - A'y)."""
    return np.clip(x - tau * (c - aty), lower, upper)


def dual_update(y, z, sigma, con_lower, con_upper):
    """y - sigma*z - sigma*proj(z-shifted point onto the negated constraint
    range), computed in complement form so components whose projection is a
    no-op come out exactly zero."""
    v = y / sigma - z
    return sigma * (v - np.clip(v, -con_upper, -con_lower))


def halpern_combine(mapped, current, anchor, inner_k, gamma):
    """Anchored extrapolation of the operator image toward the epoch anchor;
    weights (1+gamma)(k+1)/(k+2), -gamma, and 1/(k+2)."""
    w_map = (1.0 + gamma) * (inner_k + 1.0) / (inner_k + 2.0)
    w_anchor = 1.0 / (inner_k + 2.0)
    return (w_map * mapped - gamma * current) + w_anchor * anchor


def bound_penalty(v, lower, upper) -> float:
    """upper'v+ - lower'v- with extended-value semantics: an infinite bound
    multiplied by a nonzero entry yields +inf; zero entries contribute 0."""
    pos = np.maximum(v, 0.0)
    neg = np.maximum(-v, 0.0)
    finite_u = np.isfinite(upper)
    finite_l = np.isfinite(lower)
    if np.any(pos[~finite_u] > 0.0) or np.any(neg[~finite_l] > 0.0):
        return float("inf")
    return float(
        np.dot(upper[finite_u], pos[finite_u]) - np.dot(lower[finite_l], neg[finite_l])
    )


def range_violation(ax, con_lower, con_upper):
    """Ax - proj(Ax) onto [con_lower, con_upper], exact at infinite bounds."""
    return np.maximum(ax - con_upper, 0.0) - np.maximum(con_lower - ax, 0.0)


def gap_residual(obj_primal: float, obj_dual: float) -> float:
    if not math.isfinite(obj_dual) or not math.isfinite(obj_primal):
        return float("inf")
    num = abs(obj_primal - obj_dual)
    den = 1.0 + max(abs(obj_primal), abs(obj_dual))
    return num / den


# ---------------------------------------------------------------------------
# collective steps
# ---------------------------------------------------------------------------

def primal_step(blk: LocalBlock, st: DeviceState, ss: StepSizes, comm):
    """One distributed primal update; returns the new x block and the reduced
    gradient term for reuse."""
    aty = comm.allreduce_sum(Axis.R, spmv(blk.matrix_transpose, st.y))
    x_new = primal_update(st.x, blk.objective, aty, ss.tau, blk.var_lower, blk.var_upper)
    return x_new, aty


def dual_step(blk: LocalBlock, st: DeviceState, ss: StepSizes, comm, x_new):
    """One distributed dual update using the extrapolated primal point."""
    x_bar = 2.0 * x_new - st.x
    z = comm.allreduce_sum(Axis.C, spmv(blk.matrix, x_bar))
    return dual_update(st.y, z, ss.sigma, blk.con_lower, blk.con_upper)


def halpern_step(st: DeviceState, x_hat, y_hat, gamma):
    """Blend the operator image with the epoch anchor. Purely local."""
    x = halpern_combine(x_hat, st.x, st.x_anchor, st.inner_k, gamma)
    y = halpern_combine(y_hat, st.y, st.y_anchor, st.inner_k, gamma)
    return x, y


def fixed_point_error(ss: StepSizes, comm, dx, dy, adx_partial) -> float:
    """Metric norm ||dz||_P of the displacement, from globally reduced pieces.

    dx/dy are this device's displacement blocks and adx_partial the local
    partial product A_block @ dx_block. The 1/rows and 1/cols factors undo
    the replication of primal and dual blocks across the grid. Negative
    roundoff is clamped to zero before the square root.
    """
    rows = float(comm.topology.rows)
    cols = float(comm.topology.cols)
    dx_sq = comm.allreduce_sum_scalar(Axis.G, float(np.dot(dx, dx)) / rows)
    dy_sq = comm.allreduce_sum_scalar(Axis.G, float(np.dot(dy, dy)) / cols)
    cross = comm.allreduce_sum_scalar(Axis.G, float(np.dot(adx_partial, dy)))
    value = (ss.omega / ss.eta) * dx_sq + dy_sq / (ss.eta * ss.omega) + 2.0 * cross
    return math.sqrt(max(value, 0.0))


def restart_decision(
    rp: RestartParams,
    r_current: float,
    r_prev: float | None,
    inner_k: int,
    total_iterations: int,
) -> bool:
    """True when any trigger fires: sufficient decay, necessary decay with an
    error increase since the previous check, or the inner count exceeding the
    artificial fraction of all iterations so far."""
    baseline = rp.epoch_initial_fp_error
    if baseline is not None:
        if r_current <= rp.beta_sufficient * baseline:
            return True
        if (
            r_prev is not None
            and r_current <= rp.beta_necessary * baseline
            and r_current > r_prev
        ):
            return True
    return inner_k >= rp.beta_artificial * total_iterations


def pid_weight_update(
    pid: PidState,
    d_x: float,
    d_y: float,
    omega: float,
    omega_min: float = 1e-6,
    omega_max: float = 1e6,
) -> float:
    """Log-space PID step on the primal weight from the anchor distances.

    Zero distance on either side carries no balance information; the update
    is skipped and omega is returned unchanged.
    """
    if d_x <= 0.0 or d_y <= 0.0:
        return omega
    sqrt_omega = math.sqrt(omega)
    err = math.log((sqrt_omega * d_x) / (d_y / sqrt_omega))
    pid.integral += err
    log_omega = math.log(omega) - (
        pid.kp * err + pid.ki * pid.integral + pid.kd * (err - pid.last_error)
    )
    pid.last_error = err
    return min(max(math.exp(log_omega), omega_min), omega_max)


def evaluate_kkt(blk: LocalBlock, st: DeviceState, ss: StepSizes, comm,
                 scalars: ProblemScalars):
    """Distributed relative KKT residuals and objective pair.

    Returns (report, partial_ax, aty, x_probe): the local partial constraint
    product, the reduced gradient term, and the primal operator image are
    handed back so the restart check can reuse them without extra products.
    """
    partial_ax = spmv(blk.matrix, st.x)
    ax = comm.allreduce_sum(Axis.C, partial_ax)
    rp_block = range_violation(ax, blk.con_lower, blk.con_upper)
    rp_sq = comm.allreduce_sum_scalar(Axis.R, float(np.dot(rp_block, rp_block)))
    r_primal = math.sqrt(rp_sq) / (1.0 + scalars.bound_norm)

    aty = comm.allreduce_sum(Axis.R, spmv(blk.matrix_transpose, st.y))
    shifted = st.x - ss.tau * (blk.objective - aty)
    x_probe = np.clip(shifted, blk.var_lower, blk.var_upper)
    rd_block = (x_probe - st.x) / ss.tau
    rd_sq = comm.allreduce_sum_scalar(Axis.C, float(np.dot(rd_block, rd_block)))
    r_dual = math.sqrt(rd_sq) / (1.0 + scalars.objective_norm)

    reduced_cost = (x_probe - shifted) / ss.tau
    obj_p = comm.allreduce_sum_scalar(Axis.C, float(np.dot(blk.objective, st.x)))
    penalty = comm.allreduce_sum_scalar(
        Axis.R, bound_penalty(-st.y, blk.con_lower, blk.con_upper)
    )
    cost_dot = comm.allreduce_sum_scalar(Axis.C, float(np.dot(reduced_cost, st.x)))
    obj_d = -penalty + cost_dot

    report = KktReport(
        r_primal=r_primal,
        r_dual=r_dual,
        r_gap=gap_residual(obj_p, obj_d),
        obj_primal=obj_p + scalars.objective_constant,
        obj_dual=obj_d + scalars.objective_constant,
    )
    return report, partial_ax, aty, x_probe


def initial_device_state(blk: LocalBlock) -> DeviceState:
    """Start point: primal at the box projection of zero, dual at zero."""
    x0 = np.clip(np.zeros(blk.num_cols), blk.var_lower, blk.var_upper)
    y0 = np.zeros(blk.num_rows)
    return DeviceState(x=x0, y=y0, x_anchor=x0.copy(), y_anchor=y0.copy())


def _report_is_broken(report: KktReport, obj_p_raw: float) -> bool:
    return (
        not math.isfinite(report.r_primal)
        or not math.isfinite(report.r_dual)
        or math.isnan(obj_p_raw)
    )


def iterate_epoch(
    blk: LocalBlock,
    st: DeviceState,
    ss: StepSizes,
    comm,
    cfg: EngineConfig,
    scalars: ProblemScalars,
    log_hook=None,
    trace: list | None = None,
) -> DeviceOutcome:
    """Run this device's main loop across restart epochs until termination.

    All devices execute the identical collective sequence; every decision
    (terminate, restart, limits) is derived from reduced scalars so it is
    replicated without broadcasts.
    """
    rp = RestartParams(cfg.beta_sufficient, cfg.beta_necessary, cfg.beta_artificial)
    pid = PidState(cfg.pid_kp, cfg.pid_ki, cfg.pid_kd)
    is_leader = comm.coord == (0, 0)
    started = time.monotonic()
    total = 0
    status = None
    report = None
    report_at = -1

    while True:
        if total >= cfg.max_iterations:
            status = STATUS_ITERATION_LIMIT
            break

        x_hat, _ = primal_step(blk, st, ss, comm)
        y_hat = dual_step(blk, st, ss, comm, x_hat)
        if cfg.halpern:
            st.x, st.y = halpern_step(st, x_hat, y_hat, cfg.gamma)
        else:
            st.x, st.y = x_hat, y_hat
        st.inner_k += 1
        total += 1
        if trace is not None:
            trace.append((total, st.x.copy(), st.y.copy()))

        if total % cfg.kkt_interval != 0:
            continue

        report, partial_ax, aty, x_probe = evaluate_kkt(blk, st, ss, comm, scalars)
        report_at = total
        if log_hook is not None:
            log_hook(total, report, ss, st.epoch_n)
        if _report_is_broken(report, report.obj_primal):
            status = STATUS_NUMERICAL_FAILURE
            break
        if report.overall <= cfg.tolerance:
            status = STATUS_OPTIMAL
            break

        if cfg.restarts:
            x_bar = 2.0 * x_probe - st.x
            partial_probe = spmv(blk.matrix, x_bar)
            z_probe = comm.allreduce_sum(Axis.C, partial_probe)
            y_probe = dual_update(st.y, z_probe, ss.sigma, blk.con_lower, blk.con_upper)
            dx = st.x - x_probe
            dy = st.y - y_probe
            adx_partial = 0.5 * (partial_ax - partial_probe)
            fp_error = fixed_point_error(ss, comm, dx, dy, adx_partial)

            if rp.epoch_initial_fp_error is None:
                # first evaluation of the run doubles as the epoch baseline
                rp.epoch_initial_fp_error = fp_error
            if restart_decision(rp, fp_error, rp.last_fp_error, st.inner_k, total):
                d_x_sq = comm.allreduce_sum_scalar(
                    Axis.G,
                    float(np.dot(st.x - st.x_anchor, st.x - st.x_anchor))
                    / comm.topology.rows,
                )
                d_y_sq = comm.allreduce_sum_scalar(
                    Axis.G,
                    float(np.dot(st.y - st.y_anchor, st.y - st.y_anchor))
                    / comm.topology.cols,
                )
                new_omega = pid_weight_update(
                    pid, math.sqrt(d_x_sq), math.sqrt(d_y_sq), ss.omega,
                    cfg.omega_min, cfg.omega_max,
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
            local = time.monotonic() - started if is_leader else 0.0
            elapsed = comm.allreduce_sum_scalar(Axis.G, local)
            if elapsed >= cfg.time_limit_seconds:
                status = STATUS_TIME_LIMIT
                break

    if report_at != total:
        report, _, _, _ = evaluate_kkt(blk, st, ss, comm, scalars)
        if status != STATUS_NUMERICAL_FAILURE and _report_is_broken(report, report.obj_primal):
            status = STATUS_NUMERICAL_FAILURE

    return DeviceOutcome(
        status=status,
        report=report,
        state=st,
        step_sizes=ss,
        iterations=total,
        restarts=st.epoch_n,
    )
