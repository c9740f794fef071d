import csv
import json
from pathlib import Path

import numpy as np
import pytest

import src.cli.experiment_cli as experiment_cli
from src.cli.csv_export import RUN_COLUMNS, aggregate_rows, read_run_csv, run_filename
from src.cli.experiment_cli import (
    AGGREGATE_FILE,
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_RUNTIME,
    SUMMARY_FILE,
    main,
    run_experiment,
    validate_config,
)
from src.config.config import OUTPUT_DIR_ENV, load_experiment
from src.models.tabular import TabularMdp

EXACT = {
    "environment": {"kind": "deepsea", "grid_size": 4, "slip_prob": 0.0, "discount": 0.9},
    "algorithm": {"mode": "exact", "n_iters": 10},
    "sweep": {"h": [1, 3]},
}

INEXACT = {
    "environment": {"kind": "deepsea", "grid_size": 4, "slip_prob": 0.05, "discount": 0.9},
    "algorithm": {"mode": "inexact", "n_iters": 3,
                  "estimator": {"m_leaf": 2, "m_branch": 2, "horizon": 8}},
    "sweep": {"h": [1, 2], "seeds": [0, 1]},
}


@pytest.fixture(autouse=True)
def no_output_override(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)


def write_config(directory: Path, data, name="experiment.json") -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / name
    path.write_text(json.dumps(data))
    return path


def read_table(path: Path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


class TestRunExperiment:
    def test_single_iteration_gives_one_row(self, tmp_path):
        data = dict(EXACT, algorithm={"mode": "exact", "n_iters": 1}, sweep={"h": [2]})
        experiment = load_experiment(write_config(tmp_path, data), output_dir=str(tmp_path / "out"))
        result = run_experiment(experiment)
        lines = (tmp_path / "out" / run_filename(2, 0)).read_text().splitlines()
        assert lines[0] == ",".join(RUN_COLUMNS)
        assert len(lines) == 2
        assert result.run_paths == [tmp_path / "out" / run_filename(2, 0)]

    def test_files_for_every_cell(self, tmp_path):
        experiment = load_experiment(write_config(tmp_path, INEXACT), output_dir=str(tmp_path / "out"))
        result = run_experiment(experiment)
        expected = {run_filename(h, seed) for h in (1, 2) for seed in (0, 1)}
        assert {p.name for p in result.run_paths} == expected
        assert result.aggregate_path.name == AGGREGATE_FILE
        assert result.summary_path.name == SUMMARY_FILE
        assert not result.interrupted

    def test_reruns_are_byte_identical(self, tmp_path):
        config = write_config(tmp_path, INEXACT)
        run_experiment(load_experiment(config, output_dir=str(tmp_path / "first")))
        run_experiment(load_experiment(config, output_dir=str(tmp_path / "second")))
        names = sorted(p.name for p in (tmp_path / "first").iterdir())
        assert names == sorted(p.name for p in (tmp_path / "second").iterdir())
        for name in names:
            assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()

    def test_parallel_matches_serial(self, tmp_path):
        config = write_config(tmp_path, INEXACT)
        run_experiment(load_experiment(config, output_dir=str(tmp_path / "serial")))
        run_experiment(load_experiment(config, output_dir=str(tmp_path / "parallel")), jobs=2)
        for path in (tmp_path / "serial").iterdir():
            assert path.read_bytes() == (tmp_path / "parallel" / path.name).read_bytes()

    def test_aggregate_recomputable_from_runs(self, tmp_path):
        experiment = load_experiment(write_config(tmp_path, INEXACT), output_dir=str(tmp_path / "out"))
        run_experiment(experiment)
        aggregate = read_table(tmp_path / "out" / AGGREGATE_FILE)
        for row in aggregate:
            h, k = int(row["h"]), int(row["iteration"])
            runs = [read_run_csv(tmp_path / "out" / run_filename(h, seed)) for seed in (0, 1)]
            gaps = [run[k - 1]["gap"] for run in runs]
            samples = [run[k - 1]["samples_cum"] for run in runs]
            assert float(row["gap_mean"]) == pytest.approx(np.mean(gaps), rel=1e-12)
            assert float(row["gap_std"]) == pytest.approx(np.std(gaps), rel=1e-12, abs=1e-15)
            assert float(row["samples_cum_mean"]) == pytest.approx(np.mean(samples))
            assert int(row["n_runs"]) == 2
        assert len(aggregate) == 2 * 3

    def test_summary_counts_iterations_to_threshold(self, tmp_path):
        data = dict(EXACT, threshold=1e-4, algorithm={"mode": "exact", "n_iters": 50})
        experiment = load_experiment(write_config(tmp_path, data), output_dir=str(tmp_path / "out"))
        result = run_experiment(experiment)
        summary = {int(row["h"]): row for row in read_table(result.summary_path)}
        for h in (1, 3):
            reached = result.traces[(h, 0)].iterations_to(1e-4)
            if reached is None:
                assert summary[h]["runs_reached"] == "0" and summary[h]["iterations_mean"] == ""
            else:
                assert summary[h]["runs_reached"] == "1"
                assert float(summary[h]["iterations_mean"]) == reached
        assert result.traces[(3, 0)].iterations_to(1e-4) is not None

    def test_inexact_runs_record_the_bound(self, tmp_path):
        data = {
            "environment": {"kind": "random", "n_states": 6, "n_actions": 3, "seed": 2},
            "algorithm": {"mode": "inexact", "n_iters": 4,
                          "estimator": {"m_leaf": 2, "m_branch": 2, "horizon": 6}},
            "sweep": {"h": [1, 2]},
        }
        result = run_experiment(load_experiment(write_config(tmp_path, data), output_dir=str(tmp_path / "out")))
        assert len(result.run_paths) == 2
        for path in result.run_paths:
            lines = path.read_text().splitlines()[1:]
            assert all(line.split(",")[2] != "" for line in lines)
            for row in read_run_csv(path):
                assert row["gap"] <= row["bound"]

    def test_linear_fa_cell(self, tmp_path):
        data = {
            "environment": {"kind": "random", "n_states": 4, "n_actions": 2, "seed": 3},
            "algorithm": {"mode": "linear_fa", "n_iters": 2,
                          "estimator": {"m_leaf": 2, "m_branch": 2, "horizon": 5},
                          "features": {"kind": "one_hot"}},
            "sweep": {"h": [1]},
        }
        experiment = load_experiment(write_config(tmp_path, data), output_dir=str(tmp_path / "out"))
        rows = read_run_csv(run_experiment(experiment).run_paths[0])
        assert [row["iteration"] for row in rows] == [1, 2]
        assert all(row["samples_iter"] > 0 for row in rows)
        assert all(row["gap"] <= row["bound"] for row in rows)

    def test_on_demand_cell_records_stepsizes(self, tmp_path):
        data = {
            "environment": {"kind": "random", "n_states": 4, "n_actions": 2, "seed": 3},
            "algorithm": {"mode": "linear_fa", "n_iters": 3, "policy_storage": "on_demand",
                          "on_demand_stepsize": "global",
                          "estimator": {"m_leaf": 2, "m_branch": 2, "horizon": 5},
                          "features": {"kind": "one_hot"}},
            "sweep": {"h": [1]},
        }
        experiment = load_experiment(write_config(tmp_path, data), output_dir=str(tmp_path / "out"))
        rows = read_run_csv(run_experiment(experiment).run_paths[0])
        assert all(np.isfinite(row["eta"]) and row["eta"] >= 0 for row in rows)

    def test_interrupt_keeps_finished_cells(self, tmp_path, monkeypatch):
        experiment = load_experiment(write_config(tmp_path, EXACT), output_dir=str(tmp_path / "out"))
        real_run_cell = experiment_cli.run_cell

        def interrupted(experiment, h, seed):
            if h == 3:
                raise KeyboardInterrupt
            return real_run_cell(experiment, h, seed)

        monkeypatch.setattr(experiment_cli, "run_cell", interrupted)
        with pytest.raises(KeyboardInterrupt):
            run_experiment(experiment)
        aggregate = read_table(tmp_path / "out" / AGGREGATE_FILE)
        assert {row["h"] for row in aggregate} == {"1"}
        assert (tmp_path / "out" / run_filename(1, 0)).exists()
        assert not (tmp_path / "out" / run_filename(3, 0)).exists()


class TestAggregateRows:
    def test_stopped_runs_carry_their_last_row(self):
        long_run = [{"iteration": k, "gap": 1.0 / k, "samples_cum": 10 * k} for k in (1, 2, 3)]
        short_run = [{"iteration": 1, "gap": 0.5, "samples_cum": 4}]
        rows = aggregate_rows({2: [long_run, short_run]})
        assert [row["iteration"] for row in rows] == [1, 2, 3]
        assert [row["n_runs"] for row in rows] == [2, 2, 2]
        assert rows[2]["gap_mean"] == pytest.approx((1.0 / 3 + 0.5) / 2)
        assert rows[2]["samples_cum_mean"] == pytest.approx((30 + 4) / 2)

    def test_early_stopped_exact_sweep(self, tmp_path):
        data = dict(EXACT, algorithm={"mode": "exact", "n_iters": 200, "tol": 1e-6},
                    sweep={"h": [1, 3], "seeds": [0, 1]})
        experiment = load_experiment(write_config(tmp_path, data), output_dir=str(tmp_path / "out"))
        result = run_experiment(experiment)
        aggregate = read_table(result.aggregate_path)
        for h in (1, 3):
            rows = [row for row in aggregate if row["h"] == str(h)]
            assert len(rows) == len(result.traces[(h, 0)].records)
            assert all(row["n_runs"] == "2" for row in rows)


class TestMain:
    def test_run_with_seed_override(self, tmp_path):
        config = write_config(tmp_path, EXACT)
        code = main(["run", "--config", str(config), "--output-dir", str(tmp_path / "out"), "--seed", "7"])
        assert code == EXIT_OK
        runs = sorted(p.name for p in (tmp_path / "out").glob("run_*.csv"))
        assert runs == [run_filename(1, 7), run_filename(3, 7)]

    def test_output_dir_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "env_out"))
        assert main(["run", "--config", str(write_config(tmp_path, EXACT))]) == EXIT_OK
        assert (tmp_path / "env_out" / AGGREGATE_FILE).exists()

    def test_validate_exit_codes(self, tmp_path):
        good = write_config(tmp_path, EXACT, "good.json")
        bad = write_config(tmp_path, dict(EXACT, environment={"kind": "deepsea", "discount": 2}), "bad.json")
        assert main(["validate", "--config", str(good)]) == EXIT_OK
        assert main(["validate", "--config", str(bad)]) == EXIT_CONFIG
        assert {issue.field for issue in validate_config(str(bad))} == {
            "environment.grid_size", "environment.discount"}

    def test_unexpected_error_is_a_runtime_failure(self, tmp_path, monkeypatch):
        def broken(experiment, jobs=1):
            raise ValueError("worker pool broke")

        monkeypatch.setattr(experiment_cli, "run_experiment", broken)
        config = write_config(tmp_path, EXACT)
        assert main(["run", "--config", str(config), "--output-dir", str(tmp_path / "out")]) == EXIT_RUNTIME

    def test_malformed_feature_file_is_a_runtime_failure(self, tmp_path):
        (tmp_path / "features.txt").write_text("4 2 two\n1 0\n")
        data = {
            "environment": {"kind": "random", "n_states": 4, "n_actions": 2, "seed": 3},
            "algorithm": {"mode": "linear_fa", "n_iters": 2,
                          "estimator": {"m_leaf": 2, "m_branch": 2, "horizon": 5},
                          "features": {"kind": "file", "path": "features.txt"}},
            "sweep": {"h": [1]},
        }
        config = write_config(tmp_path, data)
        assert main(["validate", "--config", str(config)]) == EXIT_OK
        assert main(["run", "--config", str(config), "--output-dir", str(tmp_path / "out")]) == EXIT_RUNTIME

    def test_validate_catches_run_time_failures(self, tmp_path):
        data = dict(EXACT, environment={"kind": "deepsea", "grid_size": 1, "move_cost": 1.0},
                    algorithm={"mode": "linear_fa", "estimator": {"m_leaf": 2, "m_branch": 2, "horizon": 5},
                               "features": {"kind": "tiles"}})
        config = write_config(tmp_path, data)
        assert main(["validate", "--config", str(config)]) == EXIT_CONFIG
        assert {issue.field for issue in validate_config(str(config))} == {
            "environment", "algorithm.features.kind"}

    def test_run_with_invalid_config(self, tmp_path):
        bad = write_config(tmp_path, {"environment": {"kind": "maze"}, "sweep": {"h": [1]}})
        assert main(["run", "--config", str(bad), "--output-dir", str(tmp_path / "out")]) == EXIT_CONFIG
        assert not (tmp_path / "out").exists()

    def test_export_mdp(self, tmp_path):
        config = write_config(tmp_path, EXACT)
        out = tmp_path / "mdp" / "deepsea4.json"
        assert main(["export-mdp", "--config", str(config), "--out", str(out)]) == EXIT_OK
        mdp = TabularMdp.load_json(out)
        assert mdp.n_states == 17
        assert mdp.metadata["env"] == "deepsea"
        assert json.loads(out.read_text())["format"] == "hpmd-mdp/1"

    def test_missing_subcommand(self):
        with pytest.raises(SystemExit):
            main([])
