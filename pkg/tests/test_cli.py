"""Command line interface: exit codes, config merging, output contracts."""

from __future__ import annotations

import json
import subprocess
import sys

import pytest

from srfgo.cli import main
from srfgo.harness import read_run
from srfgo.simkit import load_trajectory

# Everything a run directory holds except wall-clock timing.
DETERMINISTIC_FILES = ("trajectory.csv", "smoothed.csv", "errors.csv",
                       "detections.csv", "auth.csv", "summary.json")


def cli(*args) -> int:
    return main([str(a) for a in args])


def tree_bytes(root) -> dict:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


class TestExitCodes:
    def test_help_exits_zero(self):
        with pytest.raises(SystemExit) as caught:
            main(["--help"])
        assert caught.value.code == 0

    def test_unknown_subcommand(self, capsys):
        assert cli("frobnicate") == 1
        assert "invalid choice" in capsys.readouterr().err

    def test_unknown_mode(self, capsys):
        assert cli("run", "--mode", "kalman") == 1
        assert "--mode" in capsys.readouterr().err

    def test_sweep_missing_axis(self, capsys):
        assert cli("sweep", "--mode", "odometry-only", "--ramp-rate", "0",
                   "--seed", "1", "--runs", "1", "--out", "x") == 1
        assert "--window-size" in capsys.readouterr().err

    def test_sweep_missing_seed(self, capsys):
        assert cli("sweep", "--mode", "odometry-only", "--ramp-rate", "0",
                   "--window-size", "100", "--runs", "1", "--out", "x") == 1
        assert "--seed" in capsys.readouterr().err

    def test_config_not_json(self, tmp_path):
        bad = tmp_path / "cfg.json"
        bad.write_text("not json")
        assert cli("run", "--config", bad) == 1

    def test_config_unknown_key(self, tmp_path):
        bad = tmp_path / "cfg.json"
        bad.write_text('{"bogus": 1}')
        assert cli("run", "--config", bad, "--mode", "sr-fgo") == 1

    def test_missing_trajectory_file(self, tmp_path):
        assert cli("run", "--mode", "sr-fgo",
                   "--trajectory", tmp_path / "missing.csv") == 1

    def test_domain_validation_maps_to_config_error(self):
        # Too short for one authentication epoch; rejected by the scenario.
        assert cli("run", "--mode", "sr-fgo", "--duration", "50") == 1

    def test_bad_spoof_direction(self):
        assert cli("run", "--mode", "sr-fgo", "--ramp-rate", "1",
                   "--spoof-direction", "1,2") == 1
        assert cli("run", "--mode", "sr-fgo", "--ramp-rate", "1",
                   "--spoof-direction", "0,0,0") == 1

    def test_negative_ramp_rate(self):
        assert cli("run", "--mode", "sr-fgo", "--ramp-rate", "-1") == 1

    def test_write_failure_is_runtime_failure(self, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("")
        assert cli("run", "--mode", "odometry-only", "--seed", "1",
                   "--out", blocker / "sub") == 2


class TestSimulate:
    def test_writes_trajectory_and_scenario(self, tmp_path):
        out = tmp_path / "sim"
        assert cli("simulate", "--kind", "circuit", "--duration", "200",
                   "--speed", "10", "--out", out) == 0
        poses = load_trajectory(out / "trajectory.csv")
        assert len(poses) == 2001
        meta = json.loads((out / "scenario.json").read_text())
        assert meta["kind"] == "circuit"
        assert meta["duration_s"] == 200.0

    def test_trajectory_feeds_run(self, tmp_path):
        sim = tmp_path / "sim"
        cli("simulate", "--duration", "200", "--out", sim)
        out = tmp_path / "run"
        assert cli("run", "--mode", "odometry-only", "--seed", "2",
                   "--trajectory", sim / "trajectory.csv", "--out", out) == 0
        assert (out / "summary.json").exists()


class TestRun:
    def test_writes_run_directory(self, tmp_path):
        out = tmp_path / "run"
        assert cli("run", "--mode", "odometry-only", "--seed", "7",
                   "--out", out) == 0
        for name in DETERMINISTIC_FILES + ("timing.json",):
            assert (out / name).exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["mode"] == "odometry-only"
        assert summary["seed"] == 7

    def test_config_supplies_flags_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"mode": "odometry-only", "seed": 3,
                                   "ramp-rate": 1.0}))
        out = tmp_path / "run"
        assert cli("run", "--config", cfg, "--seed", "9", "--out", out) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["mode"] == "odometry-only"   # from config
        assert summary["seed"] == 9                 # flag wins
        assert summary["spoof_ramp_rate_mps"] == 1.0

    def test_repeat_runs_byte_identical(self, tmp_path):
        args = ("run", "--mode", "odometry-only", "--seed", "11")
        assert cli(*args, "--out", tmp_path / "a") == 0
        assert cli(*args, "--out", tmp_path / "b") == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


class TestSweep:
    def test_grid_layout_and_summaries(self, tmp_path):
        out = tmp_path / "sw"
        assert cli("sweep", "--mode", "odometry-only", "--ramp-rate", "0,1.0",
                   "--window-size", "100", "--seed", "30", "--runs", "2",
                   "--out", out) == 0
        cells = ["odometry-only-r0-N100", "odometry-only-r1-N100"]
        for cell in cells:
            for index in range(2):
                assert (out / cell / f"run-{index:03d}" / "summary.json").exists()
            cell_summary = json.loads((out / cell / "summary.json").read_text())
            assert cell_summary["runs"] == 2
            assert cell_summary["window_size"] == 100
            assert cell_summary["failures"] == []
        top = json.loads((out / "summary.json").read_text())
        assert top["base_seed"] == 30
        assert [c["ramp_rate"] for c in top["cells"]] == [0.0, 1.0]

    def test_seeds_follow_base_seed(self, tmp_path):
        out = tmp_path / "sw"
        cli("sweep", "--mode", "odometry-only", "--ramp-rate", "0",
            "--window-size", "100", "--seed", "50", "--runs", "3", "--out", out)
        seeds = [read_run(out / "odometry-only-r0-N100" / f"run-{i:03d}").seed
                 for i in range(3)]
        assert seeds == [50, 51, 52]

    def test_worker_count_does_not_change_bytes(self, tmp_path):
        args = ("sweep", "--mode", "odometry-only", "--ramp-rate", "0,1.0",
                "--window-size", "100", "--seed", "30", "--runs", "2")
        assert cli(*args, "--out", tmp_path / "serial", "--workers", "1") == 0
        assert cli(*args, "--out", tmp_path / "pooled", "--workers", "2") == 0
        assert tree_bytes(tmp_path / "serial") == tree_bytes(tmp_path / "pooled")

    def test_failed_run_reported_others_survive(self, tmp_path, capsys):
        out = tmp_path / "sw"
        blocked = out / "odometry-only-r0-N100" / "run-000"
        blocked.parent.mkdir(parents=True)
        blocked.write_text("")  # a file where the run directory must go
        assert cli("sweep", "--mode", "odometry-only", "--ramp-rate", "0",
                   "--window-size", "100", "--seed", "60", "--runs", "2",
                   "--out", out) == 2
        assert "failed" in capsys.readouterr().err
        cell_summary = json.loads(
            (out / "odometry-only-r0-N100" / "summary.json").read_text())
        assert cell_summary["runs"] == 1
        assert len(cell_summary["failures"]) == 1

    def test_config_can_supply_grid(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"mode": "odometry-only", "ramp-rate": "0",
                                   "window-size": "100", "seed": 70,
                                   "runs": 1, "out": str(tmp_path / "sw")}))
        assert cli("sweep", "--config", cfg) == 0
        assert (tmp_path / "sw" / "summary.json").exists()


class TestReport:
    def test_aggregates_run_directories(self, tmp_path, capsys):
        out = tmp_path / "sw"
        cli("sweep", "--mode", "odometry-only", "--ramp-rate", "0",
            "--window-size", "100", "--seed", "80", "--runs", "2", "--out", out)
        capsys.readouterr()
        assert cli("report", out) == 0
        printed = capsys.readouterr().out
        assert "run-000" in printed and "run-001" in printed
        report = json.loads((out / "report.json").read_text())
        assert len(report["runs"]) == 2
        assert {row["seed"] for row in report["runs"]} == {80, 81}

    def test_empty_directory_is_config_error(self, tmp_path):
        assert cli("report", tmp_path) == 1

    def test_missing_directory_is_config_error(self, tmp_path):
        assert cli("report", tmp_path / "nope") == 1


class TestIcpDemo:
    def test_recovers_displacement(self, tmp_path):
        out = tmp_path / "demo"
        assert cli("icp-demo", "--density", "8", "--out", out) == 0
        result = json.loads((out / "result.json").read_text())
        assert result["success"]
        assert result["translation_error_m"] < 0.05
        assert result["rotation_error_deg"] < 0.5
        assert (out / "source.csv").exists() and (out / "target.csv").exists()


class TestConsoleEntry:
    def test_module_invocation(self):
        proc = subprocess.run([sys.executable, "-m", "srfgo.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        for command in ("simulate", "run", "sweep", "icp-demo", "report"):
            assert command in proc.stdout
