#!/usr/bin/env python3
"""
CSV export for the h-PMD experiment runner
Per-run traces, per-h aggregates and threshold summaries
"""

import csv
import math
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from src.algorithms.pmd_engine import IterateTrace

RUN_COLUMNS = ["iteration", "gap", "bound", "eta", "c_k", "samples_iter", "samples_cum", "wall_ms"]
AGGREGATE_COLUMNS = ["h", "iteration", "gap_mean", "gap_std", "samples_cum_mean", "samples_cum_std", "n_runs"]
SUMMARY_COLUMNS = ["h", "threshold", "n_runs", "runs_reached", "iterations_mean", "iterations_std",
                   "samples_mean", "samples_std"]

Row = Dict[str, Any]


def format_value(value: Any) -> str:
    """Text for one CSV cell; floats keep enough digits to read back exactly"""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return format(value, ".17g")


def run_filename(h: int, seed: int) -> str:
    return f"run_h{h}_seed{seed}.csv"


def trace_rows(trace: IterateTrace) -> List[Row]:
    """One row per iteration k = 1..K in RUN_COLUMNS order"""
    return [
        {
            "iteration": r.iteration,
            "gap": r.gap,
            "bound": r.bound,
            "eta": r.eta,
            "c_k": r.c_k,
            "samples_iter": r.samples,
            "samples_cum": r.samples_cum,
            "wall_ms": r.wall_ms,
        }
        for r in trace.records
    ]


def write_rows(path: Union[str, Path], columns: Sequence[str], rows: Sequence[Row]) -> Path:
    """Write a header line and one line per row"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as csvfile:
        writer = csv.writer(csvfile, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row.get(column)) for column in columns])
    return path


def write_run_csv(path: Union[str, Path], trace: IterateTrace) -> Path:
    return write_rows(path, RUN_COLUMNS, trace_rows(trace))


def _parse(text: str) -> Optional[float]:
    return None if text == "" else float(text)


def read_run_csv(path: Union[str, Path]) -> List[Row]:
    """Rows of a per-run CSV with numeric cells parsed back"""
    with open(path, "r", newline="", encoding="utf-8") as csvfile:
        reader = csv.DictReader(csvfile)
        rows = []
        for raw in reader:
            row: Row = {key: _parse(value) for key, value in raw.items()}
            row["iteration"] = int(row["iteration"])
            rows.append(row)
    return rows


def _mean_std(values: List[float]) -> tuple:
    if not values:
        return None, None
    array = np.asarray(values, dtype=float)
    return float(array.mean()), float(array.std())


def aggregate_rows(runs_by_h: Mapping[int, Sequence[Sequence[Row]]]) -> List[Row]:
    """Mean and population std of gap and cumulative samples per (h, iteration)

    A run that stopped early keeps contributing its last row to every later
    iteration, so n_runs is the same on every row of one h.
    """
    out: List[Row] = []
    for h in sorted(runs_by_h):
        runs = [run for run in runs_by_h[h] if run]
        last = max((len(run) for run in runs), default=0)
        for index in range(last):
            present = [run[min(index, len(run) - 1)] for run in runs]
            iteration = next(run[index]["iteration"] for run in runs if index < len(run))
            gaps = [row["gap"] for row in present if row.get("gap") is not None]
            samples = [row["samples_cum"] for row in present if row.get("samples_cum") is not None]
            gap_mean, gap_std = _mean_std(gaps)
            samples_mean, samples_std = _mean_std(samples)
            out.append({
                "h": h,
                "iteration": iteration,
                "gap_mean": gap_mean,
                "gap_std": gap_std,
                "samples_cum_mean": samples_mean,
                "samples_cum_std": samples_std,
                "n_runs": len(present),
            })
    return out


def summary_rows(traces_by_h: Mapping[int, Sequence[IterateTrace]], threshold: float) -> List[Row]:
    """Iterations and cumulative samples until the gap first drops to threshold"""
    out: List[Row] = []
    for h in sorted(traces_by_h):
        traces = traces_by_h[h]
        reached = [t for t in traces if t.iterations_to(threshold) is not None]
        iterations_mean, iterations_std = _mean_std([t.iterations_to(threshold) for t in reached])
        samples = [t.samples_to(threshold) for t in reached]
        samples_mean, samples_std = _mean_std([s for s in samples if s is not None])
        out.append({
            "h": h,
            "threshold": threshold,
            "n_runs": len(traces),
            "runs_reached": len(reached),
            "iterations_mean": iterations_mean,
            "iterations_std": iterations_std,
            "samples_mean": samples_mean,
            "samples_std": samples_std,
        })
    return out
