"""Command-line entry point.

Subcommands cover the full pipeline: probe traces into a series CSV,
select checkpoints, correlate scores with metrics, generate synthetic
runs, sweep selection configurations, and render report bundles.  A
`serve` subcommand runs the HTTP service wrapping the same engines.

Exit codes: 0 success, 1 validation error, 2 I/O or corrupt-file error,
3 degenerate statistics.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from typing import Optional, Sequence

import numpy as np

from gradprobe._version import __version__
from gradprobe import runops
from gradprobe.probe import DEFAULT_EPS, ProbeInputError
from gradprobe.selection import (
    DEFAULT_EMA_SPAN,
    DEFAULT_MAX_LAG,
    DEFAULT_PATIENCE,
    DEFAULT_QUANTILE,
    DEFAULT_TAIL_SIZE,
    STRATEGY_EMA,
    SelectionConfig,
    SelectionConfigError,
    TrajectoryError,
)
from gradprobe.stats import (
    DEFAULT_RESAMPLES,
    CollinearityError,
    DegenerateSampleError,
    PairedSample,
    UnstableBootstrapError,
)
from gradprobe.synthetic import (
    LatentStateModel,
    RegressionTask,
    SyntheticTask,
    TrainingDivergedError,
    default_latent_model,
    make_regression_run,
    simulate_readouts,
    train_linear_head,
)
from gradprobe.traceio import (
    ManifestError,
    ScatterOptions,
    SeriesFormatError,
    TraceFormatError,
    build_report,
    read_series,
    write_report,
    write_scatter,
    write_series,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_DEGENERATE = 3

SEED_ENV_VAR = "GRADPROBE_SEED"


def _resolve_seed(flag_value: Optional[int]) -> int:
    """--seed wins; otherwise the environment variable; otherwise 0."""
    if flag_value is not None:
        return flag_value
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ProbeInputError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from None


def _selection_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("selection")
    group.add_argument(
        "--ema-span", type=int, default=None,
        help=f"EMA smoothing span k (default {DEFAULT_EMA_SPAN}; 1 disables smoothing)",
    )
    group.add_argument(
        "--ema-beta", type=float, default=None,
        help="EMA decay given directly instead of --ema-span",
    )
    group.add_argument(
        "--tail-size", type=int, default=None,
        help=f"selection window: last N records (default {DEFAULT_TAIL_SIZE})",
    )
    group.add_argument(
        "--tail-fraction", type=float, default=None,
        help="selection window as a fraction of the series instead of --tail-size",
    )
    group.add_argument(
        "--quantile", type=float, default=DEFAULT_QUANTILE,
        help=f"candidate quantile q (default {DEFAULT_QUANTILE})",
    )
    group.add_argument(
        "--patience", type=int, default=DEFAULT_PATIENCE,
        help=f"consecutive records a candidate must persist (default {DEFAULT_PATIENCE})",
    )
    group.add_argument(
        "--max-lag", type=int, default=DEFAULT_MAX_LAG,
        help=f"lead-lag search half-width in records (default {DEFAULT_MAX_LAG})",
    )
    group.add_argument(
        "--repeats", type=int, default=1,
        help="repeated probe draws per step, median-aggregated (default 1)",
    )


def _orientation_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument(
        "--higher-is-better", dest="higher_is_better", action="store_true",
        default=True, help="metric improves upward (accuracy-like; default)",
    )
    group.add_argument(
        "--lower-is-better", dest="higher_is_better", action="store_false",
        help="metric improves downward (loss/FID-like)",
    )


def _probe_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("probe")
    group.add_argument(
        "--score", choices=runops.SCORE_CHOICES, default="fro",
        help="readout used as the score column; confidence/margin are negated "
        "so every score is lower-is-better (default fro)",
    )
    group.add_argument("--eps-z", type=float, default=DEFAULT_EPS,
                       help=f"feature-norm guard (default {DEFAULT_EPS})")
    group.add_argument("--eps-w", type=float, default=DEFAULT_EPS,
                       help=f"weight-norm guard (default {DEFAULT_EPS})")


def _seed_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--seed", type=int, default=None,
        help=f"RNG seed (default 0; env {SEED_ENV_VAR} applies when the flag is absent)",
    )


def _config_from_args(args) -> SelectionConfig:
    return SelectionConfig(
        ema_span=args.ema_span,
        ema_beta=args.ema_beta,
        tail_size=args.tail_size,
        tail_fraction=args.tail_fraction,
        quantile=args.quantile,
        patience=args.patience,
        max_lag=args.max_lag,
        repeats=args.repeats,
    )


def cmd_probe(args) -> int:
    if len(args.inputs) == 1 and args.inputs[0].endswith(".json"):
        manifest, grouped, errors = runops.load_manifest_traces(
            args.inputs[0], keep_going=args.keep_going
        )
        run_id = manifest.run_id
    else:
        grouped, errors = runops.load_grouped_traces(args.inputs, keep_going=args.keep_going)
        run_id = None
    if not grouped:
        raise ProbeInputError("no readable traces among the inputs")
    table = runops.series_from_traces(
        grouped, score_name=args.score, eps_z=args.eps_z, eps_w=args.eps_w
    )
    write_series(table, args.out)
    if args.report:
        rows = []
        for i in range(len(table)):
            row = {"step": table.steps[i], "score": table.scores[i],
                   "metric": table.metrics[i], "aux_loss": table.aux_losses[i]}
            for name in table.extra_columns:
                row[name] = table.extras[name][i]
            rows.append(row)
        report = build_report(
            "probe",
            {
                "run_id": run_id,
                "rows": rows,
                "errors": [e.as_dict() for e in errors],
            },
            config={"score": args.score, "eps_z": args.eps_z, "eps_w": args.eps_w},
        )
        write_report(report, args.report)
    msg = f"probed {len(table)} checkpoints -> {args.out}"
    if errors:
        msg += f" ({len(errors)} unreadable trace(s) skipped)"
        for e in errors:
            print(f"error: {e.path}: {e.message}", file=sys.stderr)
    print(msg)
    return EXIT_OK if not errors else EXIT_IO


def cmd_select(args) -> int:
    table = read_series(args.series)
    config = _config_from_args(args)
    doc = runops.selection_report(
        table, config, higher_is_better=args.higher_is_better, run_id=args.run_id
    )
    report = build_report("selection", doc, config=config.as_dict())
    if args.out:
        write_report(report, args.out)
    headline = doc["strategies"][STRATEGY_EMA]
    gap = headline.get("gap")
    gap_text = "metric absent" if gap is None else f"gap to tail oracle {gap:.6g}"
    print(f"chosen step {headline['chosen_step']} ({STRATEGY_EMA} strategy; {gap_text})")
    return EXIT_OK


def cmd_correlate(args) -> int:
    table = read_series(args.series)
    seed = _resolve_seed(args.seed)
    doc = runops.correlation_from_table(
        table,
        n_resamples=args.resamples,
        seed=seed,
        score_column=args.score_column,
        metric_column=args.metric_column,
    )
    report = build_report(
        "correlation", doc, seed=seed,
        config={"resamples": args.resamples, "score_column": args.score_column,
                "metric_column": args.metric_column},
    )
    if args.out:
        write_report(report, args.out)
    corr = doc["correlation"]
    print(
        f"pearson r = {corr['pearson_r']:+.4f} "
        f"[{corr['pearson_ci_low']:+.4f}, {corr['pearson_ci_high']:+.4f}] "
        f"(n={corr['n']}, spearman {corr['spearman_rho']:+.4f})"
    )
    return EXIT_OK


def cmd_simulate(args) -> int:
    seed = _resolve_seed(args.seed)
    if args.kind == "latent":
        model = default_latent_model()
        model = LatentStateModel(
            drift=args.drift, noise_scale=args.noise, plateau_step=args.plateau_step,
            readouts=model.readouts,
        )
        table = simulate_readouts(model, args.steps, seed=seed)
        if not args.out:
            raise ProbeInputError("--out is required for latent simulation")
        write_series(table, args.out)
        print(f"simulated {len(table)} latent-readout steps -> {args.out}")
        return EXIT_OK
    if not args.out_dir:
        raise ProbeInputError(f"--out-dir is required for {args.kind} simulation")
    if args.kind == "classification":
        task = SyntheticTask(
            n_classes=args.classes, feature_dim=args.dim,
            train_size=args.train_size, holdout_size=args.holdout_size,
            probe_batch=args.probe_batch, center_scale=args.center_scale,
            spread=args.spread, label_noise=args.label_noise, seed=seed,
        )
        manifest = train_linear_head(
            task, steps=args.steps, lr=args.lr, probe_every=args.probe_every,
            out_dir=args.out_dir,
        )
    else:
        task = RegressionTask(
            n_outputs=args.outputs, feature_dim=args.dim,
            train_size=args.train_size, holdout_size=args.holdout_size,
            probe_batch=args.probe_batch, target_noise=args.target_noise,
            probe_noise_range=(args.noise_lo, args.noise_hi),
            repeats=args.repeats, seed=seed,
        )
        manifest = make_regression_run(
            task, steps=args.steps, lr=args.lr, probe_every=args.probe_every,
            out_dir=args.out_dir,
        )
    n_files = sum(len(e.files) for e in manifest.entries)
    print(
        f"simulated run {manifest.run_id}: {n_files} trace(s) at "
        f"{len(manifest.entries)} step(s) + manifest -> {args.out_dir}"
    )
    return EXIT_OK


def cmd_sweep(args) -> int:
    table = read_series(args.series)
    spans = [int(v) for v in args.spans.split(",")] if args.spans else None
    tails = [int(v) for v in args.tails.split(",")] if args.tails else None
    grid = None
    if spans or tails:
        spans = spans or [1, 3, 5, 9]
        tails = tails or [60, 80, 100]
        grid = [(k, s) for k in spans for s in tails]
    sweep = runops.sweep_report(table, grid=grid, higher_is_better=args.higher_is_better)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["ema_span", "tail_size", "chosen_step", "metric", "gap"])
        for cell in sweep.cells:
            writer.writerow([
                cell.ema_span, cell.tail_size, cell.chosen_step,
                "" if cell.metric is None else repr(cell.metric),
                "" if cell.gap is None else repr(cell.gap),
            ])
    if sweep.best_cell is not None:
        best = sweep.cell(*sweep.best_cell)
        msg = (f"swept {len(sweep.cells)} cells -> {args.out}; "
               f"best {sweep.best_cell} gap {best.gap:.6g}")
        swept = {(c.ema_span, c.tail_size) for c in sweep.cells}
        if sweep.universal_cell in swept:
            universal = sweep.cell(*sweep.universal_cell)
            msg += f", universal {sweep.universal_cell} gap {universal.gap:.6g}"
        print(msg)
    else:
        print(f"swept {len(sweep.cells)} cells -> {args.out}; no metric, no gaps")
    return EXIT_OK


def cmd_report(args) -> int:
    table = read_series(args.series)
    seed = _resolve_seed(args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    doc = runops.correlation_from_table(
        table, n_resamples=args.resamples, seed=seed,
        score_column=args.score_column, metric_column=args.metric_column,
    )
    pairs = [
        (s, x, m)
        for s, x, m in zip(table.steps, table.column(args.score_column), table.metrics)
        if x is not None and m is not None
    ]
    names = [f"step-{s}" for s, _, _ in pairs]
    doc["ranking"] = runops.ranking_from_entries(
        [(n, x, m) for n, (_, x, m) in zip(names, pairs)]
    ) if len(pairs) >= 2 else None
    sample = PairedSample(
        np.array([x for _, x, _ in pairs]), np.array([m for _, _, m in pairs])
    )
    options = ScatterOptions(
        log10_x=args.log10_x,
        x_label=args.score_column,
        y_label=args.metric_column,
        title=args.title,
        lower_is_better_x=True,
        lower_is_better_y=not args.higher_is_better,
    )
    svg_path = os.path.join(args.out_dir, "scatter.svg")
    write_scatter(sample, svg_path, options)
    report = build_report(
        "report", doc, seed=seed,
        config={"resamples": args.resamples, "score_column": args.score_column,
                "metric_column": args.metric_column, "log10_x": args.log10_x},
    )
    summary_path = os.path.join(args.out_dir, "summary.json")
    write_report(report, summary_path)
    print(f"report bundle: {svg_path} + {summary_path} ({len(pairs)} points)")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from gradprobe.service import app

    print(f"serving gradprobe {__version__} on {args.host}:{args.port}")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gradprobe",
        description="Head-gradient probes for validation-free training diagnostics.",
    )
    parser.add_argument("--version", action="version", version=f"gradprobe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("probe", help="compute probe readouts from binary traces")
    p.add_argument("inputs", nargs="+",
                   help="a manifest.json or any number of trace files")
    p.add_argument("-o", "--out", required=True, help="output series CSV path")
    p.add_argument("--report", default=None, help="optional per-checkpoint JSON report")
    p.add_argument("--keep-going", action="store_true",
                   help="skip unreadable traces instead of aborting")
    _probe_flags(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("select", help="select a checkpoint from a series CSV")
    p.add_argument("series", help="series CSV (step,score,metric,aux_loss,...)")
    p.add_argument("-o", "--out", default=None, help="selection report JSON path")
    p.add_argument("--run-id", default=None, help="run identifier echoed in the report")
    _selection_flags(p)
    _orientation_flags(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("correlate", help="correlate a score column with the metric")
    p.add_argument("series", help="series CSV with score and metric columns")
    p.add_argument("-o", "--out", default=None, help="correlation report JSON path")
    p.add_argument("--score-column", default="score",
                   help="column correlated against the metric (default score)")
    p.add_argument("--metric-column", default="metric",
                   help="metric column name (default metric)")
    p.add_argument("--resamples", type=int, default=DEFAULT_RESAMPLES,
                   help=f"bootstrap resamples (default {DEFAULT_RESAMPLES})")
    _seed_flag(p)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("simulate", help="generate synthetic runs with ground truth")
    p.add_argument("--kind", choices=("classification", "regression", "latent"),
                   default="classification")
    p.add_argument("--out-dir", default=None, help="trace/manifest directory "
                   "(classification/regression kinds)")
    p.add_argument("-o", "--out", default=None, help="series CSV path (latent kind)")
    p.add_argument("--steps", type=int, default=400, help="training steps (default 400)")
    p.add_argument("--probe-every", type=int, default=5,
                   help="probe cadence in steps (default 5)")
    p.add_argument("--lr", type=float, default=0.2, help="learning rate (default 0.2)")
    p.add_argument("--classes", type=int, default=5, help="class count (default 5)")
    p.add_argument("--outputs", type=int, default=3,
                   help="regression output dim (default 3)")
    p.add_argument("--dim", type=int, default=20, help="feature dim (default 20)")
    p.add_argument("--train-size", type=int, default=256)
    p.add_argument("--holdout-size", type=int, default=512)
    p.add_argument("--probe-batch", type=int, default=64)
    p.add_argument("--center-scale", type=float, default=1.0,
                   help="cluster center scale (classification)")
    p.add_argument("--spread", type=float, default=1.0,
                   help="within-class spread (classification)")
    p.add_argument("--label-noise", type=float, default=0.05,
                   help="training label relabeling rate (classification)")
    p.add_argument("--target-noise", type=float, default=0.1,
                   help="training target noise (regression)")
    p.add_argument("--noise-lo", type=float, default=0.05,
                   help="probe target noise range low end (regression)")
    p.add_argument("--noise-hi", type=float, default=0.2,
                   help="probe target noise range high end (regression)")
    p.add_argument("--repeats", type=int, default=3,
                   help="probe traces per step (regression; default 3)")
    p.add_argument("--drift", type=float, default=1.0, help="latent drift")
    p.add_argument("--noise", type=float, default=0.02, help="latent noise scale")
    p.add_argument("--plateau-step", type=float, default=150.0,
                   help="latent saturation time constant")
    _seed_flag(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="gap table over the (ema_span, tail_size) grid")
    p.add_argument("series", help="series CSV with metric column")
    p.add_argument("-o", "--out", required=True, help="gap table CSV path")
    p.add_argument("--spans", default=None,
                   help="comma list of EMA spans (default 1,3,5,9)")
    p.add_argument("--tails", default=None,
                   help="comma list of tail sizes (default 60,80,100)")
    _orientation_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="scatter SVG + summary JSON bundle")
    p.add_argument("series", help="series CSV with score and metric")
    p.add_argument("--out-dir", required=True, help="bundle output directory")
    p.add_argument("--score-column", default="score")
    p.add_argument("--metric-column", default="metric")
    p.add_argument("--title", default="", help="scatter title")
    p.add_argument("--log10-x", action="store_true",
                   help="fit and plot in log10 of the score axis")
    p.add_argument("--resamples", type=int, default=DEFAULT_RESAMPLES)
    _orientation_flags(p)
    _seed_flag(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TraceFormatError, ManifestError, SeriesFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DegenerateSampleError, UnstableBootstrapError, CollinearityError) as exc:
        print(f"error: degenerate statistics: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ProbeInputError, SelectionConfigError, TrajectoryError,
            TrainingDivergedError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
