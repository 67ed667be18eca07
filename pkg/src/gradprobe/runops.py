"""Orchestration shared by the CLI and the HTTP service.

Turns trace files into series tables, series tables into selection and
correlation reports, and model tables into rankings — without touching
argparse, pydantic, or process exit codes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from gradprobe.probe import CLASSIFICATION, DEFAULT_EPS, ProbeInputError, ProbeScore, probe
from gradprobe.selection import (
    SelectionConfig,
    SweepTable,
    TrajectorySeries,
    evaluate_strategies,
    median_aggregate,
    sweep_configs,
)
from gradprobe.stats import (
    PairedSample,
    correlation_report,
    ols_with_covariate,
    rank_models,
)
from gradprobe.traceio import (
    READOUT_COLUMNS,
    ProbeTraceFile,
    RunManifest,
    SeriesTable,
    read_manifest,
    read_trace,
)

# score-column choices; all are oriented so that lower is better once the
# sign below is applied
SCORE_CHOICES = (
    "fro",
    "l1",
    "linf",
    "fisher",
    "score_z",
    "score_w",
    "confidence",
    "entropy",
    "margin",
)

_SCORE_FIELD = {
    "fro": "grad_fro",
    "l1": "grad_l1",
    "linf": "grad_linf",
    "fisher": "fisher_trace",
    "score_z": "score_z",
    "score_w": "score_w",
    "confidence": "confidence",
    "entropy": "entropy",
    "margin": "margin",
}

# readouts that rise as models improve get negated in the score column so
# that every selectable score is minimized
_NEGATED_SCORES = ("confidence", "margin")


@dataclass
class TraceLoadError:
    path: str
    message: str

    def as_dict(self) -> dict:
        return {"path": self.path, "message": self.message}


def score_from_probe(result: ProbeScore, score_name: str) -> float:
    """Extract one readout as a lower-is-better selection score."""
    if score_name not in _SCORE_FIELD:
        raise ProbeInputError(
            f"unknown score {score_name!r}; choose from {', '.join(SCORE_CHOICES)}"
        )
    value = getattr(result, _SCORE_FIELD[score_name])
    if value is None:
        raise ProbeInputError(
            f"score {score_name!r} is not defined for this trace (regression mode)"
        )
    return -float(value) if score_name in _NEGATED_SCORES else float(value)


def series_from_traces(
    grouped: Sequence[tuple],
    score_name: str = "fro",
    eps_z: float = DEFAULT_EPS,
    eps_w: float = DEFAULT_EPS,
) -> SeriesTable:
    """Probe grouped traces [(step, [trace, ...]), ...] into a series table.

    Steps with several traces (repeated probe draws) aggregate every
    numeric readout by the pointwise median; metric and aux_loss are
    taken from the first trace of the group, where the generators store
    identical values for all repeats.
    """
    if not grouped:
        raise ProbeInputError("no traces to probe")
    steps: list = []
    scores: list = []
    metrics: list = []
    aux_losses: list = []
    extras: dict = {name: [] for name in READOUT_COLUMNS}
    for step, traces in grouped:
        if not traces:
            raise ProbeInputError(f"step {step} has no traces")
        results = [probe(t.batch, eps_z=eps_z, eps_w=eps_w) for t in traces]
        per_trace_scores = [score_from_probe(r, score_name) for r in results]
        steps.append(int(step))
        scores.append(median_aggregate([[v] for v in per_trace_scores])[0])
        metrics.append(traces[0].metric)
        aux_losses.append(traces[0].aux_loss)
        for name in READOUT_COLUMNS:
            values = [r.as_dict()[name] for r in results]
            if any(v is None for v in values):
                extras[name].append(None)
            else:
                extras[name].append(float(np.median(values)))
    return SeriesTable(
        steps=steps,
        scores=scores,
        metrics=metrics,
        aux_losses=aux_losses,
        extra_columns=list(READOUT_COLUMNS),
        extras=extras,
    )


def load_grouped_traces(
    paths: Sequence[str], keep_going: bool = False
) -> tuple[list, list]:
    """Read trace files, group them by step, sort by step.

    Returns (grouped, errors); errors hold per-file diagnostics.  Without
    keep_going the first failure re-raises.
    """
    by_step: dict = {}
    errors: list = []
    for path in paths:
        try:
            trace = read_trace(path)
        except (OSError, ValueError) as exc:
            if not keep_going:
                raise
            errors.append(TraceLoadError(path=str(path), message=str(exc)))
            continue
        by_step.setdefault(trace.step, []).append(trace)
    grouped = [(step, by_step[step]) for step in sorted(by_step)]
    return grouped, errors


def load_manifest_traces(
    manifest_path: str, keep_going: bool = False
) -> tuple[RunManifest, list, list]:
    """Read a manifest and its traces in manifest order.

    Returns (manifest, grouped, errors).  With keep_going, unreadable
    traces are reported in errors and their steps keep whatever repeats
    survived (steps with nothing left are dropped).
    """
    manifest = read_manifest(manifest_path, check_files=not keep_going)
    base = os.path.dirname(os.path.abspath(manifest_path))
    grouped: list = []
    errors: list = []
    for entry in manifest.entries:
        traces = []
        for name in entry.files:
            path = os.path.join(base, name)
            try:
                traces.append(read_trace(path))
            except (OSError, ValueError) as exc:
                if not keep_going:
                    raise
                errors.append(TraceLoadError(path=path, message=str(exc)))
        if traces:
            grouped.append((entry.step, traces))
    return manifest, grouped, errors


def selection_report(
    table: SeriesTable,
    config: SelectionConfig,
    higher_is_better: bool = True,
    run_id: Optional[str] = None,
) -> dict:
    """Evaluate every strategy on a series table; plain-dict result."""
    trajectory = table.to_trajectory(run_id=run_id)
    evaluation = evaluate_strategies(trajectory, config, higher_is_better=higher_is_better)
    doc = evaluation.as_dict()
    doc["n_records"] = len(trajectory)
    doc["run_id"] = run_id
    return doc


def sweep_report(
    table: SeriesTable,
    grid: Optional[Sequence[tuple]] = None,
    higher_is_better: bool = True,
    base_config: Optional[SelectionConfig] = None,
) -> SweepTable:
    trajectory = table.to_trajectory()
    return sweep_configs(
        trajectory, grid=grid, higher_is_better=higher_is_better, base_config=base_config
    )


def correlation_from_table(
    table: SeriesTable,
    n_resamples: int = 10_000,
    seed: int = 0,
    score_column: str = "score",
    metric_column: str = "metric",
) -> dict:
    """Correlate a score column against the metric, with the regression
    protocol (step covariate) when at least 4 rows are present."""
    scores = table.column(score_column)
    metrics = table.column(metric_column)
    rows = [
        (s, x, m)
        for s, x, m in zip(table.steps, scores, metrics)
        if x is not None and m is not None
    ]
    if len(rows) < 3:
        raise ProbeInputError(
            f"need at least 3 rows with both {score_column!r} and {metric_column!r}, "
            f"got {len(rows)}"
        )
    steps = np.array([r[0] for r in rows], dtype=np.float64)
    x = np.array([r[1] for r in rows], dtype=np.float64)
    m = np.array([r[2] for r in rows], dtype=np.float64)
    sample = PairedSample(x, m)
    corr = correlation_report(sample, n_resamples=n_resamples, seed=seed)
    doc = {
        "correlation": corr.as_dict(),
        "regression": None,
        "score_column": score_column,
        "metric_column": metric_column,
    }
    if len(rows) >= 4 and np.ptp(steps) > 0:
        doc["regression"] = ols_with_covariate(m, x, steps).as_dict()
    return doc


def ranking_from_entries(entries: Sequence[tuple]) -> dict:
    return rank_models(entries).as_dict()
