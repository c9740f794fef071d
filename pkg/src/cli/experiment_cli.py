#!/usr/bin/env python3
"""
Experiment runner for h-PMD
Sweeps lookahead depths and seeds from a JSON experiment file and writes one CSV
per run plus per-h aggregates and threshold summaries.
"""

import argparse
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from src.algorithms.linfa import FeatureMap, compute_design, run_fa
from src.algorithms.pmd_engine import IterateTrace, run_exact, run_inexact
from src.cli.csv_export import (
    AGGREGATE_COLUMNS,
    SUMMARY_COLUMNS,
    aggregate_rows,
    run_filename,
    summary_rows,
    trace_rows,
    write_rows,
    write_run_csv,
)
from src.config.config import ExperimentConfig, FeatureConfig, load_experiment
from src.envs.generative import TabularGenerativeModel
from src.models.tabular import Policy, TabularMdp
from src.utils.errors import ConfigError, ConfigIssue, HpmdError
from src.utils.logging_setup import configure_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

AGGREGATE_FILE = "aggregate.csv"
SUMMARY_FILE = "summary.csv"


@dataclass
class ExperimentResult:
    output_dir: Path
    run_paths: List[Path] = field(default_factory=list)
    aggregate_path: Optional[Path] = None
    summary_path: Optional[Path] = None
    traces: Dict[Tuple[int, int], IterateTrace] = field(default_factory=dict)
    interrupted: bool = False


def build_features(features: FeatureConfig, experiment: ExperimentConfig, mdp: TabularMdp) -> FeatureMap:
    """Feature map named by the experiment's algorithm.features block"""
    if features.kind == "one_hot":
        return FeatureMap.one_hot(mdp.n_states, mdp.n_actions)
    if features.kind == "tiles":
        if experiment.environment.kind != "deepsea":
            raise ConfigError([ConfigIssue("algorithm.features.kind", "tiles need a deepsea environment")])
        return FeatureMap.tiles(experiment.environment.params["grid_size"], mdp.n_actions)
    if features.kind == "random":
        return FeatureMap.random_gaussian(mdp.n_states, mdp.n_actions, features.dim, features.seed)
    return FeatureMap.load_txt(features.path)


def run_cell(experiment: ExperimentConfig, h: int, seed: int) -> IterateTrace:
    """One (h, seed) cell of the sweep; builds everything it needs from the config"""
    mdp = experiment.environment.build()
    config = experiment.run_config(h, seed, mdp)
    pi0 = Policy.uniform(mdp.n_states, mdp.n_actions)
    mode = experiment.algorithm.mode
    logger.info("cell h=%d seed=%d: %s on %s (S=%d, A=%d)", h, seed, mode,
                experiment.environment.kind, mdp.n_states, mdp.n_actions)

    if mode == "exact":
        _, trace = run_exact(mdp, config, pi0)
    elif mode == "inexact":
        _, trace = run_inexact(TabularGenerativeModel(mdp), config, pi0)
    else:
        features = build_features(experiment.algorithm.features, experiment, mdp)
        design = compute_design(features, eps_kw=experiment.algorithm.eps_kw)
        _, trace = run_fa(TabularGenerativeModel(mdp), features, design, config, pi0,
                          storage=experiment.algorithm.policy_storage,
                          stepsize_scope=experiment.algorithm.on_demand_stepsize)
    return trace


def _write_tables(experiment: ExperimentConfig, result: ExperimentResult) -> None:
    runs_by_h: Dict[int, List[list]] = {}
    traces_by_h: Dict[int, List[IterateTrace]] = {}
    for h in experiment.h_values:
        for seed in experiment.seeds:
            trace = result.traces.get((h, seed))
            if trace is None:
                continue
            runs_by_h.setdefault(h, []).append(trace_rows(trace))
            traces_by_h.setdefault(h, []).append(trace)
    out = experiment.output_dir
    result.aggregate_path = write_rows(out / AGGREGATE_FILE, AGGREGATE_COLUMNS, aggregate_rows(runs_by_h))
    result.summary_path = write_rows(out / SUMMARY_FILE, SUMMARY_COLUMNS,
                                     summary_rows(traces_by_h, experiment.threshold))
    logger.info("wrote %s and %s", result.aggregate_path, result.summary_path)


def run_experiment(experiment: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    """Run every (h, seed) cell and write the CSV artifacts

    On KeyboardInterrupt the cells finished so far are still written and
    aggregated before the interrupt propagates.
    """
    result = ExperimentResult(output_dir=experiment.output_dir)
    cells = [(h, seed) for h in experiment.h_values for seed in experiment.seeds]
    logger.info("running %d cells with %d job(s), output in %s", len(cells), jobs, experiment.output_dir)

    def record(h: int, seed: int, trace: IterateTrace) -> None:
        result.traces[(h, seed)] = trace
        path = write_run_csv(experiment.output_dir / run_filename(h, seed), trace)
        result.run_paths.append(path)
        logger.info("h=%d seed=%d: %d iterations, final gap %s -> %s", h, seed, len(trace.records),
                    trace.records[-1].gap if trace.records else None, path)

    try:
        if jobs <= 1:
            for h, seed in cells:
                record(h, seed, run_cell(experiment, h, seed))
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = {pool.submit(run_cell, experiment, h, seed): (h, seed) for h, seed in cells}
                try:
                    for future in as_completed(futures):
                        h, seed = futures[future]
                        record(h, seed, future.result())
                except KeyboardInterrupt:
                    for future in futures:
                        future.cancel()
                    raise
    except KeyboardInterrupt:
        result.interrupted = True
        logger.warning("interrupted after %d of %d cells; writing partial results", len(result.traces), len(cells))
        _write_tables(experiment, result)
        raise
    _write_tables(experiment, result)
    return result


def validate_config(path: str) -> List[ConfigIssue]:
    """Every problem in an experiment file, without running anything"""
    try:
        load_experiment(path)
    except ConfigError as e:
        return e.issues
    return []


def export_mdp(config_path: str, out_path: str) -> Path:
    """Build the configured environment and write it in the MDP JSON schema"""
    experiment = load_experiment(config_path)
    mdp = experiment.environment.build()
    path = mdp.save_json(out_path)
    logger.info("wrote %d-state MDP to %s", mdp.n_states, path)
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hpmd", description="h-PMD experiment runner")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a sweep and write CSV results")
    run.add_argument("--config", default="config.json", help="experiment file (JSON)")
    run.add_argument("--output-dir", default=None, help="overrides output_dir and $HPMD_OUTPUT_DIR")
    run.add_argument("--jobs", type=int, default=1, help="number of worker processes")
    run.add_argument("--seed", type=int, default=None, help="run this single seed instead of sweep.seeds")

    validate = sub.add_parser("validate", help="check an experiment file without running it")
    validate.add_argument("--config", default="config.json")

    export = sub.add_parser("export-mdp", help="write the configured MDP as JSON")
    export.add_argument("--config", default="config.json")
    export.add_argument("--out", required=True, help="destination JSON file")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code"""
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)

    if args.command == "validate":
        issues = validate_config(args.config)
        for issue in issues:
            logger.error("%s", issue)
        if not issues:
            logger.info("%s is valid", args.config)
        return EXIT_CONFIG if issues else EXIT_OK

    try:
        if args.command == "export-mdp":
            export_mdp(args.config, args.out)
            return EXIT_OK
        experiment = load_experiment(args.config, output_dir=args.output_dir)
        if args.seed is not None:
            experiment = dataclasses.replace(experiment, seeds=[args.seed])
        run_experiment(experiment, jobs=args.jobs)
        return EXIT_OK
    except ConfigError as e:
        for issue in e.issues:
            logger.error("%s", issue)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        logger.error("interrupted")
        return EXIT_RUNTIME
    except (HpmdError, OSError) as e:
        logger.error("run failed: %s", e)
        return EXIT_RUNTIME
    except Exception:
        logger.exception("run failed with an unexpected error")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
