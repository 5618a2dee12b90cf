import math

import numpy as np
import pytest

from gridlp import GridTopology, LpProblem, SimulatedGrid, SparseMatrix
from gridlp.partition import LocalBlock
from gridlp.pdhg_engine import (
    DeviceState,
    EngineConfig,
    PidState,
    RestartParams,
    StepSizes,
    bound_penalty,
    dual_step,
    dual_update,
    evaluate_kkt,
    fixed_point_error,
    halpern_combine,
    halpern_step,
    initial_device_state,
    iterate_epoch,
    pid_weight_update,
    primal_step,
    primal_update,
    restart_decision,
)
from gridlp.sparse_kernels import spmv, transpose
from gridlp.solver_driver import problem_scalars

from conftest import random_lp, run_on_grid

INF = float("inf")


def make_block(dense, c, lv, uv, lc, uc):
    matrix = SparseMatrix.from_dense(np.asarray(dense, dtype=np.float64))
    return LocalBlock(
        coord=(0, 0),
        matrix=matrix,
        matrix_transpose=transpose(matrix),
        objective=np.asarray(c, dtype=np.float64),
        var_lower=np.asarray(lv, dtype=np.float64),
        var_upper=np.asarray(uv, dtype=np.float64),
        con_lower=np.asarray(lc, dtype=np.float64),
        con_upper=np.asarray(uc, dtype=np.float64),
    )


def solo_comm():
    return SimulatedGrid(GridTopology(1, 1)).communicator(0, 0)


def state_of(blk, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return DeviceState(x=x.copy(), y=y.copy(), x_anchor=x.copy(), y_anchor=y.copy())


class TestPrimalStep:
    def test_scalar_formula(self):
        blk = make_block([[1.0]], c=[1.0], lv=[0.0], uv=[10.0], lc=[0.0], uc=[0.0])
        st = state_of(blk, [0.0], [2.0])
        ss = StepSizes(eta=0.5, omega=1.0)  # tau = 0.5
        x_new, gradient = primal_step(blk, st, ss, solo_comm())
        np.testing.assert_array_equal(x_new, [0.5])
        np.testing.assert_array_equal(gradient, [2.0])

    def test_interior_fixed_point_when_gradient_vanishes(self):
        blk = make_block([[1.0, 0.0], [0.0, 1.0]], c=[0.0, 0.0],
                         lv=[-1.0, -1.0], uv=[1.0, 1.0], lc=[0.0] * 2, uc=[1.0] * 2)
        st = state_of(blk, [0.25, -0.5], [0.0, 0.0])
        x_new, _ = primal_step(blk, st, StepSizes(1.0, 1.0), solo_comm())
        np.testing.assert_array_equal(x_new, [0.25, -0.5])

    def test_degenerate_box_projects_to_point(self):
        blk = make_block([[1.0]], c=[5.0], lv=[0.0], uv=[0.0], lc=[0.0], uc=[0.0])
        st = state_of(blk, [0.0], [-7.0])
        x_new, _ = primal_step(blk, st, StepSizes(1.0, 1.0), solo_comm())
        np.testing.assert_array_equal(x_new, [0.0])


class TestDualStep:
    def test_equality_row_reduces_to_residual_form(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            b = rng.standard_normal()
            y = rng.standard_normal()
            z = rng.standard_normal()
            sigma = float(rng.uniform(0.1, 3.0))
            got = dual_update(np.array([y]), np.array([z]), sigma,
                              np.array([b]), np.array([b]))[0]
            expected = y - sigma * z + sigma * b
            assert abs(got - expected) <= 1e-12 * max(1.0, abs(expected))

    def test_zero_is_fixed_point_when_zero_feasible(self):
        got = dual_update(np.zeros(3), np.zeros(3), 0.7,
                          np.array([-1.0, 0.0, -INF]), np.array([1.0, 0.0, INF]))
        np.testing.assert_array_equal(got, np.zeros(3))

    def test_scalar_case_with_one_sided_range(self):
        # range (-inf, 0]: project y/sigma - z onto [0, inf)
        blk = make_block([[1.0]], c=[0.0], lv=[0.0], uv=[1.0],
                         lc=[-INF], uc=[0.0])
        st = state_of(blk, [2.0], [0.0])
        ss = StepSizes(eta=1.0, omega=1.0)  # sigma = 1
        # x_new = 2 so xbar = 2*2 - 2 = 2, z = 2
        y_new = dual_step(blk, st, ss, solo_comm(), x_new=st.x.copy())
        np.testing.assert_array_equal(y_new, [-2.0])

    def test_free_row_multiplier_is_exactly_zero(self):
        rng = np.random.default_rng(1)
        y = rng.standard_normal(100)
        z = rng.standard_normal(100)
        got = dual_update(y, z, 0.3, np.full(100, -INF), np.full(100, INF))
        assert np.all(got == 0.0)

    def test_one_sided_rows_keep_exact_sign(self):
        rng = np.random.default_rng(2)
        y = rng.standard_normal(500)
        z = rng.standard_normal(500)
        ge = dual_update(y, z, 0.9, np.zeros(500), np.full(500, INF))
        le = dual_update(y, z, 0.9, np.full(500, -INF), np.zeros(500))
        assert np.all(ge >= 0.0) and np.all(le <= 0.0)


class TestMoreauIdentity:
    def test_complement_form_matches_direct_display(self):
        rng = np.random.default_rng(3)
        bounds = [(-1.0, 2.0), (0.0, 0.0), (-INF, 1.5), (-2.5, INF), (-INF, INF)]
        worst = 0.0
        for _ in range(10_000):
            y = rng.standard_normal()
            z = rng.standard_normal()
            sigma = float(rng.uniform(0.05, 5.0))
            lo, hi = bounds[rng.integers(0, len(bounds))]
            got = dual_update(np.array([y]), np.array([z]), sigma,
                              np.array([lo]), np.array([hi]))[0]
            v = y / sigma - z
            display = y - sigma * z - sigma * float(np.clip(v, -hi, -lo))
            worst = max(worst, abs(got - display) / max(1.0, abs(display)))
        assert worst <= 1e-12

    def test_complement_decomposition_is_exact(self):
        # v - clip(v, a, b) == (v - b)^+ - (a - v)^+ holds bitwise
        rng = np.random.default_rng(4)
        v = rng.standard_normal(10_000) * 3
        a = np.full_like(v, -0.75)
        b = np.full_like(v, 1.25)
        left = v - np.clip(v, a, b)
        right = np.maximum(v - b, 0.0) - np.maximum(a - v, 0.0)
        np.testing.assert_array_equal(left, right)


class TestProjectionIdempotence:
    @pytest.mark.parametrize("lo,hi", [
        (-1.0, 2.0), (0.0, 0.0), (-INF, 3.0), (-3.0, INF), (-INF, INF),
    ])
    def test_double_projection_is_identity(self, lo, hi):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(1000) * 5
        lower = np.full_like(x, lo)
        upper = np.full_like(x, hi)
        once = np.clip(x, lower, upper)
        twice = np.clip(once, lower, upper)
        np.testing.assert_array_equal(once, twice)


class TestHalpern:
    def test_first_step_averages_image_and_anchor(self):
        mapped, current, anchor = np.array([4.0]), np.array([2.0]), np.array([1.0])
        got = halpern_combine(mapped, current, anchor, inner_k=0, gamma=0.0)
        np.testing.assert_allclose(got, [0.5 * 4.0 + 0.5 * 1.0], rtol=0, atol=0)

    def test_anchor_weight_vanishes_for_large_k(self):
        mapped, current, anchor = np.array([1.0]), np.array([2.0]), np.array([0.0])
        got = halpern_combine(mapped, current, anchor, inner_k=10**6, gamma=0.0)
        assert abs(got[0] - mapped[0]) <= 1e-6

    def test_reflected_scalar_case(self):
        got = halpern_combine(np.array([3.0]), np.array([2.0]), np.array([1.0]),
                              inner_k=1, gamma=0.5)
        np.testing.assert_allclose(got, [3.0 - 1.0 + 1.0 / 3.0], rtol=1e-15)

    def test_step_uses_zero_collectives(self):
        comm = solo_comm()
        before = comm.counter_snapshot()
        blk = make_block(np.eye(2), c=[0.0, 0.0], lv=[-1, -1], uv=[1, 1],
                         lc=[0, 0], uc=[0, 0])
        st = state_of(blk, [0.1, 0.2], [0.3, 0.4])
        halpern_step(st, np.array([0.5, 0.6]), np.array([0.7, 0.8]), gamma=0.0)
        assert comm.counter_snapshot() == before


class TestFixedPointError:
    def test_zero_displacement(self):
        ss = StepSizes(0.5, 2.0)
        got = fixed_point_error(ss, solo_comm(), np.zeros(3), np.zeros(2), np.zeros(2))
        assert got == 0.0

    def test_scalar_degenerate_direction(self):
        # metric value 1 + 1 - 2 = 0 on this displacement
        ss = StepSizes(1.0, 1.0)
        got = fixed_point_error(ss, solo_comm(), np.array([1.0]), np.array([-1.0]),
                                np.array([1.0]))
        assert got == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_dense_formula_on_single_device(self, seed):
        rng = np.random.default_rng(seed)
        m, n = int(rng.integers(1, 12)), int(rng.integers(1, 12))
        dense = rng.standard_normal((m, n))
        A = SparseMatrix.from_dense(dense)
        dx = rng.standard_normal(n)
        dy = rng.standard_normal(m)
        eta = float(rng.uniform(0.05, 0.5)) / max(np.linalg.norm(dense, 2), 1e-9)
        omega = float(rng.uniform(0.2, 5.0))
        ss = StepSizes(eta, omega)
        got = fixed_point_error(ss, solo_comm(), dx, dy, spmv(A, dx))
        value = (
            omega / eta * float(dx @ dx)
            + float(dy @ dy) / (eta * omega)
            + 2.0 * float((dense @ dx) @ dy)
        )
        expected = math.sqrt(max(value, 0.0))
        assert abs(got - expected) <= 1e-12 * max(expected, 1e-30)


class TestRestartDecision:
    def test_sufficient_decay_triggers(self):
        rp = RestartParams(0.2, 0.8, 1e9, epoch_initial_fp_error=1.0)
        assert restart_decision(rp, 0.1, None, inner_k=5, total_iterations=100)

    def test_necessary_decay_requires_increase(self):
        rp = RestartParams(0.2, 0.8, 1e9, epoch_initial_fp_error=1.0)
        assert not restart_decision(rp, 0.5, 0.6, inner_k=5, total_iterations=100)
        assert restart_decision(rp, 0.5, 0.4, inner_k=5, total_iterations=100)

    def test_artificial_restart_ignores_error(self):
        rp = RestartParams(0.2, 0.8, 0.5, epoch_initial_fp_error=1.0)
        assert restart_decision(rp, 0.99, None, inner_k=100, total_iterations=100)

    def test_quiet_when_nothing_fires(self):
        rp = RestartParams(0.2, 0.8, 0.36, epoch_initial_fp_error=1.0)
        assert not restart_decision(rp, 0.5, 0.6, inner_k=10, total_iterations=100)


class TestPidWeightUpdate:
    def test_zero_error_leaves_weight(self):
        pid = PidState(kp=1.0, ki=0.5, kd=0.5)
        assert pid_weight_update(pid, 1.0, 1.0, 1.0) == 1.0

    def test_proportional_example(self):
        pid = PidState(kp=1.0, ki=0.0, kd=0.0)
        got = pid_weight_update(pid, d_x=4.0, d_y=1.0, omega=1.0)
        assert abs(got - 0.25) <= 1e-15

    def test_equal_errors_cancel_derivative(self):
        pid = PidState(kp=0.0, ki=0.0, kd=0.7)
        w1 = pid_weight_update(pid, 2.0, 1.0, 1.0)
        assert w1 != 1.0
        # distances scaled so the second logarithmic error equals the first
        w2 = pid_weight_update(pid, 2.0 / w1, 1.0, w1)
        assert abs(w2 - w1) <= 1e-12 * w1

    def test_zero_distance_skips_update(self):
        pid = PidState(kp=1.0, ki=1.0, kd=1.0)
        assert pid_weight_update(pid, 0.0, 1.0, 2.5) == 2.5
        assert pid_weight_update(pid, 1.0, 0.0, 2.5) == 2.5
        assert pid.integral == 0.0

    def test_clamped_to_bounds(self):
        pid = PidState(kp=100.0, ki=0.0, kd=0.0)
        got = pid_weight_update(pid, 1e6, 1.0, 1.0, omega_min=1e-3, omega_max=1e3)
        assert got == 1e-3


class TestBoundPenalty:
    def test_finite_bounds(self):
        got = bound_penalty(np.array([2.0, -3.0]), np.array([-1.0, -1.0]),
                            np.array([5.0, 5.0]))
        assert got == 5.0 * 2.0 - (-1.0) * 3.0

    def test_infinite_bound_with_zero_entry_contributes_nothing(self):
        got = bound_penalty(np.array([0.0, 1.0]), np.array([-INF, 0.0]),
                            np.array([INF, 2.0]))
        assert got == 2.0

    def test_infinite_bound_with_active_entry_is_infinite(self):
        got = bound_penalty(np.array([1e-12]), np.array([0.0]), np.array([INF]))
        assert got == INF


class TestEvaluateKkt:
    def test_zero_residuals_at_hand_verified_optimum(self):
        blk = make_block([[1.0]], c=[1.0], lv=[0.0], uv=[10.0], lc=[1.0], uc=[INF])
        st = state_of(blk, [1.0], [1.0])
        ss = StepSizes(0.9, 1.0)
        scalars = problem_scalars(LpProblem(
            matrix=blk.matrix, objective=blk.objective,
            var_lower=blk.var_lower, var_upper=blk.var_upper,
            con_lower=blk.con_lower, con_upper=blk.con_upper,
        ))
        report, _, _, _ = evaluate_kkt(blk, st, ss, solo_comm(), scalars)
        assert report.r_primal == 0.0
        assert report.r_dual == 0.0
        assert report.r_gap == 0.0
        assert report.obj_primal == 1.0 and report.obj_dual == 1.0

    def test_equality_violation_scales_by_unit_normalizer(self):
        delta = 0.125
        blk = make_block([[1.0]], c=[0.0], lv=[-10.0], uv=[10.0], lc=[0.0], uc=[0.0])
        st = state_of(blk, [delta], [0.0])
        scalars = problem_scalars(LpProblem(
            matrix=blk.matrix, objective=blk.objective,
            var_lower=blk.var_lower, var_upper=blk.var_upper,
            con_lower=blk.con_lower, con_upper=blk.con_upper,
        ))
        report, _, _, _ = evaluate_kkt(blk, st, StepSizes(1.0, 1.0), solo_comm(), scalars)
        assert report.r_primal == delta  # normalizer is 1 + ||[0,0]|| = 1

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_dense_oracle_on_random_iterates(self, seed):
        from conftest import dense_kkt_residuals

        problem = random_lp(seed, m=9, n=12, nnz=60)
        layout_grid = (1, 1)

        rng = np.random.default_rng(seed + 100)
        x = rng.uniform(-1, 5, problem.num_variables)
        y = rng.standard_normal(problem.num_constraints)

        def worker(blk, comm, layout):
            st = state_of(blk, x[layout.perm.col_perm], y[layout.perm.row_perm])
            ss = StepSizes(0.4, 1.7)
            report, _, _, _ = evaluate_kkt(blk, st, ss, comm, problem_scalars(problem))
            return report

        results, _ = run_on_grid(problem, layout_grid, worker, seed=seed)
        report = results[(0, 0)]
        rp, rd, rg = dense_kkt_residuals(problem, x, y, tau=0.4 / 1.7)
        assert abs(report.r_primal - rp) <= 1e-12 * max(rp, 1.0)
        assert abs(report.r_dual - rd) <= 1e-12 * max(rd, 1.0)
        assert abs(report.r_gap - rg) <= 1e-12 * max(rg, 1.0)


class TestGridInvariance:
    @pytest.mark.parametrize("seed", range(4))
    def test_kkt_report_is_grid_shape_invariant(self, seed):
        problem = random_lp(seed, m=11, n=13, nnz=70)
        rng = np.random.default_rng(seed + 50)
        x = rng.uniform(-1, 5, problem.num_variables)
        y = rng.standard_normal(problem.num_constraints)
        ss = StepSizes(0.3, 2.0)
        scalars = problem_scalars(problem)

        def worker(blk, comm, layout):
            c0, c1 = layout.col_range(comm.coord[1])
            r0, r1 = layout.row_range(comm.coord[0])
            xp = x[layout.perm.col_perm][c0:c1]
            yp = y[layout.perm.row_perm][r0:r1]
            st = state_of(blk, xp, yp)
            report, _, _, _ = evaluate_kkt(blk, st, ss, comm, scalars)
            return report

        reports = {}
        for shape in [(1, 1), (2, 2)]:
            results, _ = run_on_grid(problem, shape, worker, seed=seed)
            per_device = list(results.values())
            assert all(r == per_device[0] for r in per_device)
            reports[shape] = per_device[0]
        a, b = reports[(1, 1)], reports[(2, 2)]
        for field in ("r_primal", "r_dual", "r_gap", "obj_primal", "obj_dual"):
            va, vb = getattr(a, field), getattr(b, field)
            assert abs(va - vb) <= 1e-12 * max(abs(va), abs(vb), 1.0)

    def test_trajectories_agree_across_grids_over_100_iterations(self):
        problem = random_lp(21, m=10, n=12, nnz=60, inequality_fraction=0.3)
        cfg = EngineConfig(tolerance=1e-300, max_iterations=100, kkt_interval=64)
        scalars = problem_scalars(problem)

        def make_worker(traces):
            def worker(blk, comm, layout):
                trace = []
                traces[comm.coord] = trace
                ss = StepSizes(0.05, 1.0)
                iterate_epoch(blk, initial_device_state(blk), ss, comm, cfg,
                              scalars, trace=trace)
                return layout
            return worker

        traces_small, traces_large = {}, {}
        _, layout1 = run_on_grid(problem, (1, 1), make_worker(traces_small), seed=3)
        _, layout2 = run_on_grid(problem, (2, 2), make_worker(traces_large), seed=3)

        for k in range(100):
            x1 = traces_small[(0, 0)][k][1]
            y1 = traces_small[(0, 0)][k][2]
            x2 = np.concatenate([traces_large[(0, 0)][k][1], traces_large[(0, 1)][k][1]])
            y2 = np.concatenate([traces_large[(0, 0)][k][2], traces_large[(1, 0)][k][2]])
            scale_x = max(float(np.max(np.abs(x1))), 1.0)
            scale_y = max(float(np.max(np.abs(y1))), 1.0)
            assert float(np.max(np.abs(x1 - x2))) <= 1e-10 * scale_x
            assert float(np.max(np.abs(y1 - y2))) <= 1e-10 * scale_y


class TestEngineReductions:
    def test_vanilla_pdhg_when_halpern_and_restarts_disabled(self):
        problem = random_lp(31, m=8, n=10, nnz=40)
        iterations = 96
        cfg = EngineConfig(tolerance=1e-300, max_iterations=iterations,
                           kkt_interval=32, halpern=False, restarts=False)
        scalars = problem_scalars(problem)
        trace = []

        def worker(blk, comm, layout):
            ss = StepSizes(0.08, 1.3)
            iterate_epoch(blk, initial_device_state(blk), ss, comm, cfg,
                          scalars, trace=trace)
            return blk

        results, layout = run_on_grid(problem, (1, 1), worker, seed=5)
        blk = results[(0, 0)]

        # bare recursion, written straight from the update displays
        tau, sigma = 0.08 / 1.3, 0.08 * 1.3
        x = np.clip(np.zeros(blk.num_cols), blk.var_lower, blk.var_upper)
        y = np.zeros(blk.num_rows)
        for k in range(iterations):
            x_new = primal_update(x, blk.objective, spmv(blk.matrix_transpose, y),
                                  tau, blk.var_lower, blk.var_upper)
            z = spmv(blk.matrix, 2.0 * x_new - x)
            y = dual_update(y, z, sigma, blk.con_lower, blk.con_upper)
            x = x_new
            np.testing.assert_array_equal(trace[k][1], x)
            np.testing.assert_array_equal(trace[k][2], y)

    def test_plain_halpern_when_gamma_zero_and_restarts_disabled(self):
        problem = random_lp(32, m=8, n=10, nnz=40)
        iterations = 64
        cfg = EngineConfig(tolerance=1e-300, max_iterations=iterations,
                           kkt_interval=64, gamma=0.0, restarts=False)
        scalars = problem_scalars(problem)
        trace = []

        def worker(blk, comm, layout):
            ss = StepSizes(0.08, 1.3)
            iterate_epoch(blk, initial_device_state(blk), ss, comm, cfg,
                          scalars, trace=trace)
            return blk

        results, _ = run_on_grid(problem, (1, 1), worker, seed=5)
        blk = results[(0, 0)]

        tau, sigma = 0.08 / 1.3, 0.08 * 1.3
        x0 = np.clip(np.zeros(blk.num_cols), blk.var_lower, blk.var_upper)
        y0 = np.zeros(blk.num_rows)
        x, y = x0.copy(), y0.copy()
        for k in range(iterations):
            x_hat = primal_update(x, blk.objective, spmv(blk.matrix_transpose, y),
                                  tau, blk.var_lower, blk.var_upper)
            z = spmv(blk.matrix, 2.0 * x_hat - x)
            y_hat = dual_update(y, z, sigma, blk.con_lower, blk.con_upper)
            x = halpern_combine(x_hat, x, x0, k, 0.0)
            y = halpern_combine(y_hat, y, y0, k, 0.0)
            np.testing.assert_array_equal(trace[k][1], x)
            np.testing.assert_array_equal(trace[k][2], y)


class TestIterateEpoch:
    def test_already_optimal_start_terminates_at_first_check(self):
        blk = make_block([[1.0]], c=[0.0], lv=[0.0], uv=[2.0], lc=[-1.0], uc=[1.0])
        cfg = EngineConfig(tolerance=1e-9, max_iterations=1000, kkt_interval=64)
        scalars = problem_scalars(LpProblem(
            matrix=blk.matrix, objective=blk.objective,
            var_lower=blk.var_lower, var_upper=blk.var_upper,
            con_lower=blk.con_lower, con_upper=blk.con_upper,
        ))
        outcome = iterate_epoch(blk, initial_device_state(blk), StepSizes(0.9, 1.0),
                                solo_comm(), cfg, scalars)
        assert outcome.status == "optimal"
        assert outcome.iterations == 64
        assert outcome.restarts == 0

    def test_log_hook_receives_every_pass(self):
        problem = random_lp(33, m=6, n=8, nnz=30)
        lines = []

        def worker(blk, comm, layout):
            cfg = EngineConfig(tolerance=1e-300, max_iterations=96, kkt_interval=32)
            iterate_epoch(
                blk, initial_device_state(blk), StepSizes(0.1, 1.0), comm, cfg,
                problem_scalars(problem),
                log_hook=lambda it, report, ss, epoch: lines.append((it, epoch)),
            )
            return True

        run_on_grid(problem, (1, 1), worker)
        assert [it for it, _ in lines] == [32, 64, 96]
