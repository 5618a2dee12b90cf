"""Experiment harness: run the (permutation x partitioning) strategy matrix
over instance suites and aggregate with the shifted geometric mean.

Wall-clock numbers from the simulated in-process grid measure this harness,
not GPU hardware; the report therefore leans on layout statistics, iteration
counts, and communication counters, with timings as context. Reports land as
CSV + JSON plus rendered figures.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .figures import render_layout_heatmap, render_strategy_bars
from .generators import GeneratorSpec, generate
from .lp_model import LpProblem
from .partition import PERMUTATIONS, PARTITIONINGS, build_layout, layout_summary
from .solver_driver import SolverConfig, solve

CSV_COLUMNS = [
    "instance", "permutation", "partitioning", "procs", "grid_rows", "grid_cols",
    "status", "objective", "iterations", "restarts", "wall_seconds",
    "nnz_max_over_mean", "vector_allreduces", "scalar_allreduces", "solved",
]


def sgm10(values, shift: float = 10.0) -> float:
    """Shifted geometric mean: exp(mean(log(v + shift))) - shift."""
    values = np.asarray(list(values), dtype=np.float64)
    if len(values) == 0:
        return 0.0
    if np.any(values + shift <= 0):
        raise ValueError("values must exceed -shift")
    return float(math.exp(np.mean(np.log(values + shift))) - shift)


@dataclass(frozen=True)
class ExperimentPlan:
    instances: list          # (name, LpProblem) pairs
    permutations: tuple = PERMUTATIONS
    partitionings: tuple = PARTITIONINGS
    procs: tuple = (4,)
    config: SolverConfig = SolverConfig()


def run_matrix_experiment(plan: ExperimentPlan, out_dir=None) -> dict:
    """Solve every (instance, permutation, partitioning, procs) cell.

    Returns {"rows": [...], "aggregates": [...]} and, when out_dir is given,
    writes report.csv, report.json, a layout heatmap per strategy cell for
    the first instance, and SGM bar charts.
    """
    rows = []
    for procs in plan.procs:
        for perm in plan.permutations:
            for part in plan.partitionings:
                for name, problem in plan.instances:
                    cfg = replace(
                        plan.config, permutation=perm, partitioning=part,
                        n_procs=procs, grid=None,
                    )
                    started = time.perf_counter()
                    result = solve(problem, cfg)
                    wall = time.perf_counter() - started
                    grid_axes = result.counters["grid_total"]
                    rows.append({
                        "instance": name,
                        "permutation": perm,
                        "partitioning": part,
                        "procs": procs,
                        "grid_rows": result.layout["grid"]["rows"],
                        "grid_cols": result.layout["grid"]["cols"],
                        "status": result.status,
                        "objective": result.objective,
                        "iterations": result.iterations,
                        "restarts": result.restarts,
                        "wall_seconds": wall,
                        "nnz_max_over_mean": result.layout["nnz_max_over_mean"],
                        "vector_allreduces": sum(
                            grid_axes[a]["vector_calls"] for a in grid_axes
                        ),
                        "scalar_allreduces": sum(
                            grid_axes[a]["scalar_calls"] for a in grid_axes
                        ),
                        "solved": result.status == "optimal",
                    })

    aggregates = _aggregate(rows, plan)
    report = {"rows": rows, "aggregates": aggregates}
    if out_dir is not None:
        _write_report(report, plan, Path(out_dir))
    return report


def _aggregate(rows, plan) -> list[dict]:
    aggregates = []
    limit = plan.config.time_limit_seconds
    for procs in plan.procs:
        for perm in plan.permutations:
            for part in plan.partitionings:
                cell = [
                    r for r in rows
                    if r["permutation"] == perm and r["partitioning"] == part
                    and r["procs"] == procs
                ]
                if not cell:
                    continue
                unsolved = sum(not r["solved"] for r in cell)
                # unsolved runs count at the time-limit value, flagged
                times = [
                    r["wall_seconds"] if r["solved"] or limit is None else limit
                    for r in cell
                ]
                aggregates.append({
                    "procs": procs,
                    "permutation": perm,
                    "partitioning": part,
                    "instances": len(cell),
                    "unsolved": unsolved,
                    "sgm10_wall_seconds": sgm10(times),
                    "sgm10_iterations": sgm10([r["iterations"] for r in cell]),
                    "max_nnz_max_over_mean": max(r["nnz_max_over_mean"] for r in cell),
                })
    return aggregates


def _write_report(report, plan, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(report["rows"])
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2)

    if plan.instances:
        name, problem = plan.instances[0]
        procs = plan.procs[0]
        for perm in plan.permutations:
            for part in plan.partitionings:
                layout = build_layout(
                    problem, n_procs=procs, block_size=plan.config.block_size,
                    seed=plan.config.seed, permutation=perm, partitioning=part,
                )
                render_layout_heatmap(
                    layout_summary(problem, layout),
                    out_dir / f"layout_{name}_{perm}_{part}.png",
                    title=f"{name}: {perm} + {part}",
                )
    for procs in plan.procs:
        cells = [a for a in report["aggregates"] if a["procs"] == procs]
        if cells:
            render_strategy_bars(
                cells, "sgm10_wall_seconds",
                out_dir / f"sgm10_procs{procs}.png",
                ylabel="SGM10 wall seconds",
                title=f"strategy matrix, {procs} workers",
            )


def instances_from_specs(specs: list[GeneratorSpec]) -> list:
    """Materialize (name, problem) pairs for an ExperimentPlan."""
    out = []
    for spec in specs:
        problem = generate(spec)
        out.append((problem.name or f"{spec.kind}-{spec.seed}", problem))
    return out
