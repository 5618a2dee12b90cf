import json
import shutil

import pytest

from gridlp.cli import main


@pytest.fixture
def tiny(toy_mps_path, tmp_path):
    path = tmp_path / "tiny.mps"
    shutil.copy(toy_mps_path, path)
    return path


class TestSolveCommand:
    def test_optimal_solve_exits_zero_and_matches_reference(self, tiny, tmp_path, capsys):
        out = tmp_path / "grid.json"
        ref = tmp_path / "ref.json"
        assert main(["solve", str(tiny), "--procs", "1", "--tol", "1e-8",
                     "--json", str(out)]) == 0
        assert main(["solve", str(tiny), "--procs", "1", "--tol", "1e-8",
                     "--reference", "--json", str(ref)]) == 0
        got = json.loads(out.read_text())
        expected = json.loads(ref.read_text())
        assert got["status"] == "optimal"
        assert got["objective"] == expected["objective"]  # bit-identical oracle
        assert abs(got["objective"] - (-8.0)) <= 1e-6 * 9.0
        assert "status      optimal" in capsys.readouterr().out

    def test_missing_file_exits_one(self, capsys):
        assert main(["solve", "definitely-missing.mps"]) == 1
        assert "no such file" in capsys.readouterr().err

    def test_unknown_flag_exits_one(self, tiny):
        assert main(["solve", str(tiny), "--frobnicate"]) == 1

    def test_malformed_input_exits_one(self, tmp_path, capsys):
        bad = tmp_path / "bad.mps"
        bad.write_text("ROWS\n N obj\nWHATEVER\n")
        assert main(["solve", str(bad)]) == 1
        assert "line 3" in capsys.readouterr().err

    def test_grid_procs_conflict_exits_one(self, tiny, capsys):
        assert main(["solve", str(tiny), "--grid", "2x2", "--procs", "2"]) == 1
        assert "devices" in capsys.readouterr().err

    def test_grid_parse_error_exits_one(self, tiny):
        assert main(["solve", str(tiny), "--grid", "two-by-two"]) == 1

    def test_iteration_limit_exits_two(self, tiny):
        code = main(["solve", str(tiny), "--tol", "1e-12", "--max-iters", "64"])
        assert code == 2

    def test_repeat_runs_write_byte_identical_json(self, tiny, tmp_path):
        first = tmp_path / "a.json"
        second = tmp_path / "b.json"
        args = ["solve", str(tiny), "--grid", "2x2", "--seed", "7", "--tol", "1e-7"]
        assert main(args + ["--json", str(first)]) == 0
        assert main(args + ["--json", str(second)]) == 0
        assert first.read_bytes() == second.read_bytes()


class TestLayoutCommand:
    def test_prints_stats_and_writes_outputs(self, tiny, tmp_path, capsys):
        json_out = tmp_path / "layout.json"
        fig_out = tmp_path / "layout.png"
        assert main(["layout", str(tiny), "--procs", "2",
                     "--json", str(json_out), "--fig", str(fig_out)]) == 0
        printed = capsys.readouterr().out
        assert "grid" in printed and "nnz" in printed
        payload = json.loads(json_out.read_text())
        assert payload["total_nnz"] == 4
        assert fig_out.exists() and fig_out.stat().st_size > 0

    def test_forced_grid_bypasses_selection(self, tiny, capsys):
        assert main(["layout", str(tiny), "--grid", "2x1"]) == 0
        assert "grid 2x1" in capsys.readouterr().out


class TestBenchCommand:
    def test_runs_suite_and_writes_reports(self, tmp_path, capsys):
        suite = tmp_path / "suite.toml"
        suite.write_text(
            """
[suite]
tolerance = 1e-6
max_iterations = 30000
block_size = 4
procs = [4]
permutations = ["none", "block_random"]
partitionings = ["uniform", "nnz"]

[[instance]]
name = "bd"
kind = "block_diagonal"
num_blocks = 4
block_rows = 6
block_cols = 8
nnz_target = 120
seed = 1
"""
        )
        out_dir = tmp_path / "reports"
        assert main(["bench", str(suite), "--out-dir", str(out_dir)]) == 0
        assert (out_dir / "report.csv").exists()
        assert (out_dir / "report.json").exists()
        assert list(out_dir.glob("*.png"))
        assert "SGM10" in capsys.readouterr().out

    def test_missing_suite_exits_one(self):
        assert main(["bench", "nope.toml"]) == 1

    def test_empty_suite_exits_one(self, tmp_path):
        suite = tmp_path / "empty.toml"
        suite.write_text("[suite]\n")
        assert main(["bench", str(suite)]) == 1
