"""Config parsing, sweep outputs, determinism, and exit codes."""

import json
import os

import numpy as np
import pytest
import yaml

from gmes.cli import (SweepSpec, main, parse_config, run_name, run_sweep,
                      spec_to_dict)
from gmes.errors import ConfigError

FAST_GMES = dict(restarts=4, ucb_maxiter=25, ucb_prescan=16, batch_restarts=1,
                 ascent_iters=10)


def write_yaml(path, payload):
    with open(path, "w") as fh:
        yaml.safe_dump(payload, fh)
    return str(path)


class TestParseConfig:
    def test_minimal_config_gets_documented_defaults(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml",
                          {"experiments": [{"algorithm": "gmes",
                                            "function": "ackley"}]})
        spec = parse_config(path)
        assert len(spec.cells) == 1
        cell = spec.cells[0]
        assert cell.iterations == 150
        assert cell.sigma0 == 0.1
        assert cell.gmes.ascent_iters == 50
        assert cell.gmes.beta_start == 3.0 and cell.gmes.beta_decay == 0.01
        assert cell.gmes.beta(10) == pytest.approx(2.9)
        assert cell.kernel.smoothness == 1.5
        assert cell.seeds == (0, 1, 2, 3, 4)

    def test_top_level_shorthand(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml",
                          {"algorithm": "bucb", "function": "bird",
                           "agents": 3, "seeds": [7]})
        spec = parse_config(path)
        assert len(spec.cells) == 1
        assert spec.cells[0].algorithm == "bucb"
        assert spec.cells[0].m == 3
        assert spec.cells[0].seeds == (7,)

    def test_unknown_algorithm_names_valid_options(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml",
                          {"experiments": [{"algorithm": "ei_mcmc",
                                            "function": "ackley"}]})
        with pytest.raises(ConfigError) as err:
            parse_config(path)
        msg = str(err.value)
        assert "ei_mcmc" in msg
        for name in ("gmes", "ucb_pe", "bucb", "thompson"):
            assert name in msg

    def test_all_problems_reported_at_once(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml",
                          {"experiments": [{"algorithm": "nope",
                                            "function": "nope2",
                                            "agents": 0,
                                            "iterations": 0,
                                            "typo_key": 1}]})
        with pytest.raises(ConfigError) as err:
            parse_config(path)
        assert len(err.value.problems) >= 5

    def test_cross_product_expansion(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml",
                          {"experiments": [{"algorithm": ["gmes", "bucb"],
                                            "function": ["ackley", "bird"]}]})
        spec = parse_config(path)
        assert len(spec.cells) == 4

    def test_round_trip_identity(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml",
                          {"output_dir": "out", "jobs": 2,
                           "experiments": [{"algorithm": "gmes",
                                            "function": "rosenbrock",
                                            "agents": 4, "seeds": [1, 2],
                                            "gmes": {"ascent_iters": 12}}]})
        spec = parse_config(path)
        emitted = tmp_path / "resolved.json"
        with open(emitted, "w") as fh:
            json.dump(spec_to_dict(spec), fh)
        again = parse_config(str(emitted))
        assert again == spec

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            parse_config("/nonexistent/config.yaml")


def small_sweep(tmp_path, seeds=(0, 1)):
    return {
        "output_dir": str(tmp_path / "out"),
        "seeds": list(seeds),
        "experiments": [{"algorithm": ["gmes", "thompson"],
                         "function": "ackley",
                         "agents": 2, "iterations": 2,
                         "gmes": dict(FAST_GMES)}],
    }


class TestRunSweep:
    def test_file_count_contract(self, tmp_path):
        spec = parse_config(write_yaml(tmp_path / "c.yaml",
                                       small_sweep(tmp_path)))
        assert run_sweep(spec) == 0
        out = spec.output_dir
        run_csvs = [f for f in os.listdir(out)
                    if f.endswith(".csv") and f != "aggregate.csv"]
        svgs = [f for f in os.listdir(out) if f.endswith(".svg")]
        # 2 algorithms x 1 function x 2 seeds -> 4 runs, 1 aggregate, 2 svgs
        assert len(run_csvs) == 4
        assert os.path.exists(os.path.join(out, "aggregate.csv"))
        assert len(svgs) == 2
        assert not os.path.exists(os.path.join(out, "failures.json"))

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = small_sweep(tmp_path, seeds=(3,))
        spec = parse_config(write_yaml(tmp_path / "c.yaml", cfg))
        run_sweep(spec)
        cell = spec.cells[0]
        path = os.path.join(spec.output_dir, run_name(cell, 3) + ".csv")
        with open(path, "rb") as fh:
            first = fh.read()
        run_sweep(spec)
        with open(path, "rb") as fh:
            second = fh.read()
        assert first == second

    def test_aggregate_matches_recomputed_mean(self, tmp_path):
        spec = parse_config(write_yaml(tmp_path / "c.yaml",
                                       small_sweep(tmp_path)))
        run_sweep(spec)
        out = spec.output_dir
        agg = {}
        with open(os.path.join(out, "aggregate.csv")) as fh:
            header = fh.readline().strip().split(",")
            for line in fh:
                parts = line.strip().split(",")
                key = (parts[0], int(parts[3]))
                agg[key] = float(parts[4])
        for cell in spec.cells:
            runs = []
            for seed in cell.seeds:
                data = np.loadtxt(os.path.join(out, run_name(cell, seed) + ".csv"),
                                  delimiter=",", skiprows=1)
                runs.append(data[:, 1])
            mean = np.mean(runs, axis=0)
            for t in range(mean.size):
                assert agg[(cell.algorithm, t)] == pytest.approx(mean[t],
                                                                 rel=1e-12)

    def test_csv_header_schema(self, tmp_path):
        spec = parse_config(write_yaml(tmp_path / "c.yaml",
                                       small_sweep(tmp_path, seeds=(0,))))
        run_sweep(spec)
        cell = spec.cells[0]
        path = os.path.join(spec.output_dir, run_name(cell, 0) + ".csv")
        with open(path) as fh:
            header = fh.readline().strip()
        assert header == ("iter,instant_regret,cumulative_regret,best_value,"
                          "inferred_x0,inferred_x1")
        sidecar = os.path.join(spec.output_dir, run_name(cell, 0) + ".json")
        with open(sidecar) as fh:
            side = json.load(fh)
        assert "wall_ms" in side and len(side["wall_ms"]) == 3
        assert side["config"]["algorithm"] == cell.algorithm


class TestMainEntry:
    def test_validate_roundtrip(self, tmp_path, capsys):
        path = write_yaml(tmp_path / "c.yaml", small_sweep(tmp_path))
        assert main(["validate", path]) == 0
        resolved = json.loads(capsys.readouterr().out)
        assert resolved["experiments"][0]["iterations"] == 2

    def test_validate_bad_config_exit_1(self, tmp_path, capsys):
        path = write_yaml(tmp_path / "c.yaml",
                          {"experiments": [{"algorithm": "wat"}]})
        assert main(["validate", path]) == 1
        assert "config error" in capsys.readouterr().err

    def test_bench_prints_final_regret(self, tmp_path, capsys):
        cfg = small_sweep(tmp_path, seeds=(0,))
        cfg["experiments"][0]["algorithm"] = "thompson"
        path = write_yaml(tmp_path / "c.yaml", cfg)
        assert main(["bench", path]) == 0
        out = capsys.readouterr().out
        assert "final instant regret" in out

    def test_run_with_overrides(self, tmp_path):
        cfg = small_sweep(tmp_path, seeds=(0,))
        path = write_yaml(tmp_path / "c.yaml", cfg)
        alt = str(tmp_path / "alt")
        assert main(["run", path, "--out", alt, "--seed-offset", "10"]) == 0
        cell = parse_config(path).cells[0]
        assert os.path.exists(os.path.join(alt, run_name(cell, 10) + ".csv"))

    def test_seek_preset_writes_outputs(self, tmp_path, capsys):
        out = str(tmp_path / "seek")
        assert main(["seek", "single", "--agents", "2", "--seed", "0",
                     "--out", out, "--iters", "2"]) == 0
        files = os.listdir(out)
        assert any(f.endswith(".csv") for f in files)
        assert any(f.endswith(".json") for f in files)
        summary_path = [f for f in files if f.endswith(".json")][0]
        with open(os.path.join(out, summary_path)) as fh:
            summary = json.load(fh)
        assert summary["agents"] == 2
        assert "iterations_to_converge" in summary

    def test_seek_unknown_scenario_exit_1(self, capsys):
        assert main(["seek", "warehouse"]) == 1

    def test_seek_scenario_file(self, tmp_path):
        scenario = {
            "arena": {"lower": [0.0, 0.0], "upper": [2.0, 2.0]},
            "lamps": [{"position": [1.5, 1.5], "height": 0.7,
                       "intensity": 1.5}],
            "starts": [[0.3, 0.3], [0.3, 0.8]],
        }
        path = write_yaml(tmp_path / "scene.yaml", scenario)
        out = str(tmp_path / "o")
        assert main(["seek", path, "--agents", "2", "--seed", "1",
                     "--out", out, "--iters", "2"]) == 0


def test_sweep_spec_defaults():
    spec = SweepSpec()
    assert spec.jobs == 1
    assert spec.aggregate_mean and spec.aggregate_ci
