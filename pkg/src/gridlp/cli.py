"""Command-line front end: solve an MPS file, run the experiment matrix, or
inspect a partition layout without solving.

Exit codes: 0 optimal, 1 usage or input error, 2 iteration/time limit,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from .bench import ExperimentPlan, run_matrix_experiment
from .figures import render_layout_heatmap
from .generators import GeneratorSpec, generate
from .lp_model import MpsParseError, load_mps
from .partition import GridTopology, build_layout, layout_summary
from .solver_driver import SolverConfig, reference_solve, solve

_PERM_FLAGS = {"none": "none", "full": "full_random", "block": "block_random"}
_STATUS_EXIT = {
    "optimal": 0,
    "iteration_limit": 2,
    "time_limit": 2,
    "numerical_failure": 3,
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="gridlp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sv = sub.add_parser("solve", help="solve one MPS instance")
    _add_layout_flags(sv)
    sv.add_argument("--tol", type=float, default=1e-4, help="KKT tolerance")
    sv.add_argument("--max-iters", type=int, default=200_000)
    sv.add_argument("--kkt-interval", type=int, default=64)
    sv.add_argument("--time-limit", type=float, default=None, help="seconds")
    sv.add_argument("--json", type=Path, default=None, help="write result JSON here")
    sv.add_argument("--reference", action="store_true",
                    help="run the single-device oracle instead of the grid")

    ly = sub.add_parser("layout", help="print per-device layout stats, no solve")
    _add_layout_flags(ly)
    ly.add_argument("--json", type=Path, default=None, help="write layout JSON here")
    ly.add_argument("--fig", type=Path, default=None, help="write a heatmap PNG here")

    bn = sub.add_parser("bench", help="run a strategy-matrix experiment suite")
    bn.add_argument("suite", type=Path, help="TOML suite description")
    bn.add_argument("--out-dir", type=Path, default=Path("gridlp-report"))
    return parser


def _add_layout_flags(p):
    p.add_argument("file", type=Path, help="MPS input (optionally gzipped)")
    p.add_argument("--procs", type=int, default=None, help="device budget")
    p.add_argument("--grid", type=str, default=None, help="force RxC topology")
    p.add_argument("--block-size", type=int, default=64)
    p.add_argument("--perm", choices=sorted(_PERM_FLAGS), default="block")
    p.add_argument("--partition", choices=["uniform", "nnz"], default="nnz")
    p.add_argument("--seed", type=int, default=0)


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        rows, cols = text.lower().split("x")
        return int(rows), int(cols)
    except ValueError:
        raise _UsageError(f"--grid expects RxC, got {text!r}") from None


def _resolve_procs(args) -> tuple[int, tuple[int, int] | None]:
    grid = _parse_grid(args.grid) if args.grid else None
    if grid is not None:
        needed = grid[0] * grid[1]
        if args.procs is not None and needed > args.procs:
            raise _UsageError(
                f"--grid {args.grid} needs {needed} devices but --procs is {args.procs}"
            )
        return (args.procs if args.procs is not None else needed), grid
    return (args.procs if args.procs is not None else 1), grid


def _load_problem(path: Path):
    if not path.exists():
        raise _UsageError(f"no such file: {path}")
    try:
        return load_mps(path)
    except MpsParseError as exc:
        raise _UsageError(f"{path}: {exc}") from exc


def _cmd_solve(args) -> int:
    problem = _load_problem(args.file)
    procs, grid = _resolve_procs(args)
    cfg = SolverConfig(
        tolerance=args.tol,
        max_iterations=args.max_iters,
        time_limit_seconds=args.time_limit,
        kkt_interval=args.kkt_interval,
        block_size=args.block_size,
        seed=args.seed,
        n_procs=procs,
        grid=grid,
        permutation=_PERM_FLAGS[args.perm],
        partitioning=args.partition,
    )
    result = reference_solve(problem, cfg) if args.reference else solve(problem, cfg)

    print(f"status      {result.status}")
    print(f"objective   {result.objective:.12e}")
    print(f"residuals   primal {result.report.r_primal:.3e}  "
          f"dual {result.report.r_dual:.3e}  gap {result.report.r_gap:.3e}")
    print(f"iterations  {result.iterations}  (restarts {result.restarts})")
    print(f"grid        {result.layout['grid']['rows']}x{result.layout['grid']['cols']}"
          f"  wall {result.wall_seconds:.3f}s")
    if args.json is not None:
        _write_json(args.json, result.to_json_dict())
    return _STATUS_EXIT[result.status]


def _cmd_layout(args) -> int:
    problem = _load_problem(args.file)
    procs, grid = _resolve_procs(args)
    layout = build_layout(
        problem,
        n_procs=procs,
        block_size=args.block_size,
        seed=args.seed,
        permutation=_PERM_FLAGS[args.perm],
        partitioning=args.partition,
        grid=GridTopology(*grid) if grid else None,
    )
    summary = layout_summary(problem, layout)
    print(f"grid {summary['grid']['rows']}x{summary['grid']['cols']}  "
          f"total nnz {summary['total_nnz']}  "
          f"max/mean {summary['nnz_max_over_mean']:.3f}")
    print(f"{'device':>8}  {'rows':>8}  {'cols':>8}  {'nnz':>10}")
    for dev in summary["devices"]:
        print(f"({dev['i']},{dev['j']})".rjust(8)
              + f"  {dev['rows']:>8}  {dev['cols']:>8}  {dev['nnz']:>10}")
    if args.json is not None:
        _write_json(args.json, summary)
    if args.fig is not None:
        render_layout_heatmap(summary, args.fig, title=str(args.file.name))
        print(f"heatmap written to {args.fig}")
    return 0


def _cmd_bench(args) -> int:
    if not args.suite.exists():
        raise _UsageError(f"no such file: {args.suite}")
    with open(args.suite, "rb") as fh:
        suite = tomllib.load(fh)
    plan = _plan_from_suite(suite, args.suite.parent)
    report = run_matrix_experiment(plan, out_dir=args.out_dir)
    print(f"{len(report['rows'])} runs over {len(plan.instances)} instances; "
          f"reports in {args.out_dir}")
    for agg in report["aggregates"]:
        print(f"  procs={agg['procs']} {agg['permutation']}+{agg['partitioning']}: "
              f"SGM10 {agg['sgm10_wall_seconds']:.3f}s, "
              f"unsolved {agg['unsolved']}/{agg['instances']}")
    return 0


def _plan_from_suite(suite: dict, base_dir: Path) -> ExperimentPlan:
    opts = suite.get("suite", {})
    instances = []
    for entry in suite.get("instance", []):
        kind = entry.get("kind")
        if kind == "mps":
            path = Path(entry["path"])
            if not path.is_absolute():
                path = base_dir / path
            problem = _load_problem(path)
            instances.append((entry.get("name", path.stem), problem))
        else:
            fields = {k: v for k, v in entry.items() if k != "name"}
            problem = generate(GeneratorSpec(**fields))
            instances.append((entry.get("name", problem.name), problem))
    if not instances:
        raise _UsageError("suite defines no [[instance]] entries")
    cfg = SolverConfig(
        tolerance=opts.get("tolerance", 1e-4),
        max_iterations=opts.get("max_iterations", 200_000),
        time_limit_seconds=opts.get("time_limit_seconds"),
        kkt_interval=opts.get("kkt_interval", 64),
        block_size=opts.get("block_size", 64),
        seed=opts.get("seed", 0),
    )
    return ExperimentPlan(
        instances=instances,
        permutations=tuple(opts.get("permutations", ("none", "full_random", "block_random"))),
        partitionings=tuple(opts.get("partitionings", ("uniform", "nnz"))),
        procs=tuple(opts.get("procs", (4,))),
        config=cfg,
    )


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def main(argv=None) -> int:
    level = os.environ.get("GRIDLP_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(name)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "solve":
            return _cmd_solve(args)
        if args.command == "layout":
            return _cmd_layout(args)
        return _cmd_bench(args)
    except _UsageError as exc:
        print(f"gridlp: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"gridlp: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
