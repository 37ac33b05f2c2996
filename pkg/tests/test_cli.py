import json
import os

import numpy as np
import pytest

from netspc.cli import main
from netspc.config import config_hash, load_config, parse_config


def demo_config(**overrides):
    cfg = {
        "name": "cli_test",
        "model": {
            "A": [[0.0, -0.80, -0.60], [0.80, -0.36, 0.48], [0.60, 0.48, -0.64]],
            "B": [[0.16], [0.14], [1.0]],
            "u_max": 15.0,
        },
        "weights": {
            "Q": [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
            "Q_f": [[12, 1, 4], [1, 19, 2], [4, 2, 2]],
            "R": [[2.0]],
        },
        "horizon": {"N": 4, "N_r": 3},
        "protocol": "tp1",
        "channel": {"kind": "bernoulli_iid", "p": 0.9, "seed": 7},
        "noise": {"kind": "gaussian_iid",
                  "covariance": [[1, 0, 0], [0, 1, 0], [0, 0, 1]], "seed": 8},
        "mu": 100.0,
        "sim": {"steps": 3, "paths": 1, "x0": [10, 10, -10]},
        "moments": {"samples": 10_000, "seed": 9},
    }
    cfg.update(overrides)
    return cfg


def write_config(tmp_path, name="cfg.json", **overrides):
    path = tmp_path / name
    path.write_text(json.dumps(demo_config(**overrides)))
    return str(path)


class TestMoments:
    def test_diagnostics_and_exit_zero(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        rc = main(["moments", cfg, "--cache-dir", str(tmp_path / "cache")])
        out = capsys.readouterr().out
        assert rc == 0
        assert "cache key" in out and "min-eig(calL)" in out

    def test_deterministic_shortcut_reported(self, tmp_path, capsys):
        cfg = write_config(tmp_path, channel={"kind": "bernoulli_iid",
                                              "p": 1.0, "seed": 7})
        rc = main(["moments", cfg, "--cache-dir", str(tmp_path / "cache")])
        assert rc == 0
        assert "deterministic channel shortcut" in capsys.readouterr().out

    def test_missing_field_exit_one_with_path(self, tmp_path, capsys):
        raw = demo_config()
        del raw["channel"]["p"]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(raw))
        rc = main(["moments", str(path), "--cache-dir", str(tmp_path / "cache")])
        assert rc == 1
        assert "channel.p" in capsys.readouterr().err


class TestRun:
    def test_smoke_run(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "out"
        rc = main(["run", cfg, "--out", str(out), "--paths", "1", "--steps", "3"])
        assert rc == 0
        doc = json.loads((out / "tp1_p0.9_s1" / "metrics.json").read_text()) \
            if (out / "tp1_p0.9_s1").exists() else \
            json.loads(next(out.glob("tp1*/metrics.json")).read_text())
        assert "metrics" in doc and doc["metrics"]["steps"] == 3
        assert (out / "manifest.json").exists()
        assert (out / "resolved_config.json").exists()

    def test_baseline_comparison_columns(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "out"
        rc = main(["run", cfg, "--out", str(out), "--baseline", "ce_mpc"])
        assert rc == 0
        doc = json.loads(next(out.glob("tp1*/metrics.json")).read_text())
        assert "ce_mpc" in doc["baselines"]
        assert "cost_pct_diff_vs_ce_mpc" in doc["comparison"]

    def test_identical_config_identical_bytes(self, tmp_path):
        cfg = write_config(tmp_path)
        outs = []
        for sub in ("o1", "o2"):
            out = tmp_path / sub
            assert main(["run", cfg, "--out", str(out)]) == 0
            outs.append(next(out.glob("tp1*/metrics.json")).read_bytes())
        assert outs[0] == outs[1]

    def test_trace_csv_schema(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "out"
        assert main(["run", cfg, "--out", str(out)]) == 0
        trace = next(out.glob("tp1*/trace.csv")).read_text().splitlines()
        header = trace[0].split(",")
        assert header[:2] == ["path", "t"]
        for col in ("x0", "u0", "ua0", "nu", "payload", "stage_cost", "null_control"):
            assert col in header
        assert len(trace) == 1 + 3  # header + steps


class TestReport:
    @pytest.fixture()
    def grid_run(self, tmp_path):
        cfg = write_config(tmp_path, grid={"p": [0.9, 1.0], "sigma_scale": [1.0],
                                           "protocol": ["tp1", "tp2"]})
        out = tmp_path / "grid_out"
        assert main(["run", cfg, "--out", str(out), "--baseline", "ce_mpc"]) == 0
        return out

    def test_full_grid_tables_and_figures(self, grid_run, capsys):
        rc = main(["report", str(grid_run)])
        assert rc == 0
        rep = grid_run / "report"
        msb = (rep / "fig_msb.csv").read_text().splitlines()
        assert msb[0].startswith("protocol,p,sigma_scale,msb")
        assert len(msb) == 1 + 4  # 2 protocols x 2 p x 1 sigma
        for png in ("fig_msb.png", "fig_energy.png", "fig_sparsity.png",
                    "fig_cost.png"):
            assert (rep / png).stat().st_size > 0
        cost = (rep / "fig_cost.csv").read_text().splitlines()
        assert "ce_mpc_avg_cost" in cost[0]

    def test_missing_cell_reported(self, grid_run, capsys):
        victim = next(p for p in grid_run.iterdir()
                      if p.is_dir() and (p / "metrics.json").exists())
        (victim / "metrics.json").unlink()
        rc = main(["report", str(grid_run)])
        assert rc == 1
        assert "missing grid cells" in capsys.readouterr().err

    def test_empty_dir_usage_error(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        rc = main(["report", str(empty)])
        assert rc == 1
        assert "no completed runs" in capsys.readouterr().err


class TestConfigRoundTrip:
    def test_resolved_config_is_a_fixpoint(self, tmp_path):
        cfg_path = write_config(tmp_path)
        grid = load_config(cfg_path)
        again = parse_config(grid.resolved, name=grid.name)
        assert grid.resolved == again.resolved
        assert config_hash(grid.resolved) == config_hash(again.resolved)

    def test_hash_sensitive_to_content(self, tmp_path):
        g1 = load_config(write_config(tmp_path, name="a.json"))
        g2 = load_config(write_config(tmp_path, name="b.json", mu=7.0))
        assert config_hash(g1.resolved) != config_hash(g2.resolved)
