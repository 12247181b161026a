"""CLI: exit codes, emitted files, determinism."""
import json
from pathlib import Path

import numpy as np
import pytest

from polycontact.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(args):
    return main([str(a) for a in args])


class TestSdfGrid:
    def test_emits_one_file_per_tau(self, tmp_path):
        rc = run(["sdf-grid", "--config", CONFIGS / "sdf_grid_square.json",
                  "--out", tmp_path / "g"])
        assert rc == 0
        files = sorted((tmp_path / "g").glob("sdf_grid_tau_*.csv"))
        assert len(files) == 4
        rows = np.loadtxt(files[0], delimiter=",", skiprows=1)
        assert rows.shape == (61 * 61, 5)

    def test_empty_grid_errors(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"G": [[1, 0]], "h": [1.0],
                                   "x_range": [0, 1], "y_range": [0, 1],
                                   "nx": 0, "ny": 5, "tau": [1e-3]}))
        rc = run(["sdf-grid", "--config", bad, "--out", tmp_path / "g"])
        assert rc == 2

    def test_bad_config_errors(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{\"G\": \"nope\"}")
        rc = run(["sdf-grid", "--config", bad, "--out", tmp_path / "g"])
        assert rc == 2

    def test_rerun_byte_identical(self, tmp_path):
        run(["sdf-grid", "--config", CONFIGS / "sdf_grid_square.json",
             "--out", tmp_path / "a", "--seed", 1])
        run(["sdf-grid", "--config", CONFIGS / "sdf_grid_square.json",
             "--out", tmp_path / "b", "--seed", 1])
        for fa in sorted((tmp_path / "a").iterdir()):
            fb = tmp_path / "b" / fa.name
            assert fa.read_bytes() == fb.read_bytes()


class TestSimulate:
    def test_cube_drop(self, tmp_path):
        rc = run(["simulate", "--body", CONFIGS / "cube_drop_body.json",
                  "--config", CONFIGS / "cube_drop_sim.json",
                  "--out", tmp_path])
        assert rc == 0
        rows = np.loadtxt(tmp_path / "trajectory.csv", delimiter=",", skiprows=1)
        assert rows.shape[0] == 121
        # settles on the slab: z -> half-extent + sigma/force
        assert rows[-1, 3] == pytest.approx(0.05 + 1e-4 / 0.5, abs=1e-5)

    def test_offset_tracking(self, tmp_path):
        rc = run(["simulate", "--body", CONFIGS / "free_reach_body.json",
                  "--config", CONFIGS / "offset_tracking_sim.json",
                  "--out", tmp_path])
        assert rc == 0
        rows = np.loadtxt(tmp_path / "trajectory.csv", delimiter=",", skiprows=1)
        # steady-state error equals the 2 cm offset
        assert rows[-1, 1] == pytest.approx(0.1 - 0.02, abs=1e-4)

    def test_missing_body_errors(self, tmp_path):
        rc = run(["simulate", "--body", tmp_path / "none.json",
                  "--config", CONFIGS / "cube_drop_sim.json", "--out", tmp_path])
        assert rc == 2


class TestSolve:
    def test_free_reach_end_to_end(self, tmp_path):
        rc = run(["solve", "--body", CONFIGS / "free_reach_body.json",
                  "--config", CONFIGS / "free_reach_ocp.json",
                  "--out", tmp_path])
        assert rc == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["converged"]
        assert len(report["stages"]) == 2
        assert (tmp_path / "reference.csv").exists()
        assert (tmp_path / "scenario_0.csv").exists()
        assert (tmp_path / "report_timings.json").exists()
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        assert metrics["terminal_errors"][0]["translational"] <= 5e-3

    def test_hessian_and_mode_flags_recorded(self, tmp_path):
        rc = run(["solve", "--body", CONFIGS / "free_reach_body.json",
                  "--config", CONFIGS / "free_reach_ocp.json",
                  "--out", tmp_path, "--hessian", "gn", "--mode", "relaxation"])
        assert rc in (0, 3)
        assert (tmp_path / "report.json").exists()

    def test_solve_deterministic(self, tmp_path):
        for d in ("a", "b"):
            run(["solve", "--body", CONFIGS / "free_reach_body.json",
                 "--config", CONFIGS / "free_reach_ocp.json",
                 "--out", tmp_path / d, "--seed", 3])
        for name in ("reference.csv", "scenario_0.csv", "report.json",
                     "metrics.json"):
            assert ((tmp_path / "a" / name).read_bytes()
                    == (tmp_path / "b" / name).read_bytes()), name


class TestBench:
    def test_seed_required(self, tmp_path):
        rc = run(["bench", "--body", CONFIGS / "free_reach_body.json",
                  "--config", CONFIGS / "free_reach_ocp.json", "--out", tmp_path])
        assert rc == 2

    def test_bench_tables(self, tmp_path):
        rc = run(["bench", "--body", CONFIGS / "free_reach_body.json",
                  "--config", CONFIGS / "free_reach_ocp.json",
                  "--out", tmp_path, "--seed", 0, "--evals", 50])
        assert rc == 0
        table = (tmp_path / "bench.csv").read_text().strip().splitlines()
        assert table[0] == "mode,stage,iterations,converged,kkt_residual,comp_residual"
        assert len(table) == 3   # header + 2 stages
        timings = (tmp_path / "bench_timings.csv").read_text().splitlines()
        # per-stage split sums to total within 5% (trailing rows carry the
        # contact-evaluation microbenchmark figures)
        stage_rows = [ln for ln in timings[1:] if not ln.startswith("contact_eval")]
        assert stage_rows
        for line in stage_rows:
            parts = line.split(",")
            sdf, cons, core, total = map(float, parts[2:6])
            assert sdf + cons + core == pytest.approx(total, rel=0.05)
