"""gradprobe: head-gradient probes for validation-free training diagnostics.

Compute cheap gradient readouts from exported checkpoint batches, smooth
and select checkpoints without labels, and quantify how well the probe
tracks true model quality.
"""

from gradprobe._version import __version__
from gradprobe.probe import (
    CLASSIFICATION,
    REGRESSION,
    ProbeBatch,
    ProbeInputError,
    ProbeScore,
    cross_entropy,
    fisher_trace,
    gradient_norms,
    head_gradient,
    normalized_scores,
    output_readouts,
    probe,
    softmax_columns,
)
from gradprobe.selection import (
    SelectionConfig,
    SelectionConfigError,
    SelectionResult,
    TrajectoryRecord,
    TrajectorySeries,
    best_lag,
    ema_smooth,
    evaluate_strategies,
    median_aggregate,
    select_argmin,
    select_quantile_patience,
    sweep_configs,
    tail_window,
)
from gradprobe.stats import (
    BootstrapCI,
    CorrelationReport,
    DegenerateSampleError,
    PairedSample,
    RegressionReport,
    bootstrap_ci,
    correlation_report,
    detrended_correlation,
    loo_sensitivity,
    ols_with_covariate,
    pearson,
    rank_models,
    spearman,
)
from gradprobe.traceio import (
    ProbeTraceFile,
    RunManifest,
    SeriesTable,
    TraceFormatError,
    emit_scatter,
    read_manifest,
    read_series,
    read_trace,
    write_manifest,
    write_report,
    write_series,
    write_trace,
)

__all__ = [
    "__version__",
    "CLASSIFICATION",
    "REGRESSION",
    "ProbeBatch",
    "ProbeInputError",
    "ProbeScore",
    "softmax_columns",
    "cross_entropy",
    "head_gradient",
    "gradient_norms",
    "fisher_trace",
    "normalized_scores",
    "output_readouts",
    "probe",
    "SelectionConfig",
    "SelectionConfigError",
    "SelectionResult",
    "TrajectoryRecord",
    "TrajectorySeries",
    "ema_smooth",
    "tail_window",
    "select_argmin",
    "select_quantile_patience",
    "best_lag",
    "median_aggregate",
    "evaluate_strategies",
    "sweep_configs",
    "PairedSample",
    "BootstrapCI",
    "CorrelationReport",
    "RegressionReport",
    "DegenerateSampleError",
    "pearson",
    "spearman",
    "bootstrap_ci",
    "loo_sensitivity",
    "detrended_correlation",
    "ols_with_covariate",
    "rank_models",
    "correlation_report",
    "ProbeTraceFile",
    "RunManifest",
    "SeriesTable",
    "TraceFormatError",
    "read_trace",
    "write_trace",
    "read_manifest",
    "write_manifest",
    "read_series",
    "write_series",
    "write_report",
    "emit_scatter",
]
