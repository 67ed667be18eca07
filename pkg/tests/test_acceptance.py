"""Acceptance gate: every headline requirement, one pass/fail line each.

Run with -s to see the [PASS]/[FAIL] lines; each check also asserts, so
a plain pytest run fails loudly on any unmet requirement.  Expected
values come from independent oracles computed here (finite differences,
direct holdout recomputation, scipy statistics), never from the code
under test.
"""

import dataclasses
import json
import time
from types import SimpleNamespace

import numpy as np
import pytest
import scipy.stats

from gradprobe.probe import (
    CLASSIFICATION,
    ProbeBatch,
    head_gradient,
    probe,
)
from gradprobe.runops import load_manifest_traces, series_from_traces
from gradprobe.selection import (
    HEAD_GRADIENT_STRATEGIES,
    UNIVERSAL_CELL,
    SelectionConfig,
    TrajectorySeries,
    evaluate_strategies,
    sweep_configs,
)
from gradprobe.stats import PairedSample, bootstrap_ci, loo_sensitivity
from gradprobe.synthetic import (
    RegressionTask,
    SyntheticTask,
    descend_trajectory,
    holdout_accuracy,
    make_regression_run,
    sample_dataset,
)
from gradprobe.traceio import (
    ProbeTraceFile,
    SeriesTable,
    build_report,
    read_report,
    read_series,
    series_from_csv,
    series_to_csv,
    trace_from_bytes,
    trace_to_bytes,
    write_report,
)

GOLDEN_SERIES = __file__.rsplit("/", 1)[0] + "/data/golden_select_series.csv"


def _report(ok: bool, name: str, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# --------------------------------------------------- shared synthetic runs


@pytest.fixture(scope="module")
def ten_runs():
    """Ten seeded classification runs: C=5, d=20, 400 steps, probe every 5.

    Each run keeps the library's metric column alongside an accuracy
    column recomputed here from raw weights, so correlation checks never
    depend on the library's own holdout code.
    """
    t0 = time.perf_counter()
    runs = []
    for seed in range(10):
        task = SyntheticTask(n_classes=5, feature_dim=20, seed=seed)
        ds = sample_dataset(task)
        z = ds.x_train[:, ds.probe_index]
        y = ds.y_train[ds.probe_index]
        steps, scores, metrics, oracle = [], [], [], []
        for t, w, _ in descend_trajectory(task, 400, 0.2, data=ds):
            if t % 5:
                continue
            steps.append(t)
            scores.append(probe(ProbeBatch.classification(z, w, y)).grad_fro)
            metrics.append(holdout_accuracy(w, ds.x_hold, ds.y_hold))
            predicted = np.argmax(w @ ds.x_hold, axis=0)
            oracle.append(float(np.mean(predicted == ds.y_hold)))
        runs.append(SimpleNamespace(
            seed=seed,
            steps=steps,
            scores=scores,
            metrics=metrics,
            oracle_accuracy=oracle,
            series=TrajectorySeries.from_columns(steps, scores, metrics),
        ))
    return SimpleNamespace(runs=runs, build_seconds=time.perf_counter() - t0)


def _monotone_fixtures():
    """Noise-free improving runs of several shapes and lengths."""
    out = []
    n = 40
    out.append(TrajectorySeries.from_columns(
        list(range(0, 2 * n, 2)),
        [3.0 - 0.05 * t for t in range(n)],
        [0.2 + 0.01 * t for t in range(n)],
        [3.0 - 0.05 * t for t in range(n)],
    ))
    n = 100
    out.append(TrajectorySeries.from_columns(
        list(range(n)),
        [float(np.exp(-t / 30.0)) for t in range(n)],
        [1.0 - float(np.exp(-t / 25.0)) for t in range(n)],
        [float(np.exp(-t / 30.0)) for t in range(n)],
    ))
    n = 25
    out.append(TrajectorySeries.from_columns(
        list(range(0, 5 * n, 5)),
        [1.0 / (1.0 + t) for t in range(n)],
        [t / (1.0 + t) for t in range(n)],
        [2.0 / (1.0 + t) for t in range(n)],
    ))
    return out


# --------------------------------------------- 1. gradient vs finite diff


def _reference_loss(w, batch):
    logits = w @ batch.features
    if batch.mode == CLASSIFICATION:
        shifted = logits - logits.max(axis=0)
        logp = shifted - np.log(np.exp(shifted).sum(axis=0))
        return -float(np.mean(logp[batch.labels, np.arange(batch.batch_size)]))
    resid = logits - batch.targets
    return float(np.mean(0.5 * (resid**2).sum(axis=0)))


def _fd_relative_error(batch, h=1e-5):
    w0 = batch.head_weights
    fd = np.zeros_like(w0)
    for i in range(w0.shape[0]):
        for j in range(w0.shape[1]):
            wp = w0.copy()
            wp[i, j] += h
            wm = w0.copy()
            wm[i, j] -= h
            fd[i, j] = (_reference_loss(wp, batch) - _reference_loss(wm, batch)) / (2 * h)
    g = head_gradient(batch)
    return np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)


def test_gradient_matches_finite_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        c = int(rng.integers(2, 11))
        d = int(rng.integers(1, 17))
        b = int(rng.integers(1, 9))
        batch = ProbeBatch.classification(
            features=rng.normal(0, 1, (d, b)),
            head_weights=rng.normal(0, 1, (c, d)),
            labels=rng.integers(0, c, b),
        )
        worst = max(worst, _fd_relative_error(batch))
    for _ in range(50):
        c = int(rng.integers(1, 11))
        d = int(rng.integers(1, 17))
        b = int(rng.integers(1, 9))
        batch = ProbeBatch.regression(
            features=rng.normal(0, 1, (d, b)),
            head_weights=rng.normal(0, 1, (c, d)),
            targets=rng.normal(0, 1, (c, b)),
        )
        worst = max(worst, _fd_relative_error(batch))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 5.0
    _report(ok, "gradient vs central finite differences",
            f"worst relative error {worst:.3g} over 100 classification + 50 "
            f"regression instances in {elapsed:.2f}s (limits 1e-5, 5s)")


# --------------------------------------------------- 2. closed-form checks


def test_closed_form_zero_weight_binary():
    batch = ProbeBatch.classification(
        features=np.array([[1.0]]),
        head_weights=np.zeros((2, 1)),
        labels=np.array([0]),
    )
    result = probe(batch)
    err_norm = abs(result.grad_fro - np.sqrt(0.5))
    err_loss = abs(result.loss - np.log(2.0))
    ok = err_norm <= 1e-9 and err_loss <= 1e-9
    _report(ok, "closed-form zero-weight binary case",
            f"|grad_fro - sqrt(1/2)| = {err_norm:.2e}, "
            f"|loss - ln 2| = {err_loss:.2e} (limit 1e-9)")


# ------------------------------------- 3. score-accuracy correlation, 10 runs


def test_score_accuracy_correlation_over_ten_runs(ten_runs):
    t0 = time.perf_counter()
    rs = []
    for run in ten_runs.runs:
        assert run.metrics == run.oracle_accuracy  # library vs direct recompute
        r, _ = scipy.stats.pearsonr(run.scores, run.oracle_accuracy)
        rs.append(float(r))
    elapsed = ten_runs.build_seconds + time.perf_counter() - t0
    passing = sum(1 for r in rs if r <= -0.8)
    ok = passing >= 9 and elapsed < 60.0
    _report(ok, "gradient-norm vs held-out accuracy",
            f"{passing}/10 runs with Pearson r <= -0.8 (weakest {max(rs):.3f}) "
            f"in {elapsed:.1f}s (needs >= 9/10, < 60s)")


# ------------------------------------------------- 4. universal selection


def test_universal_selection_beats_last_baseline(ten_runs):
    t0 = time.perf_counter()
    gaps_universal, gaps_last = [], []
    for run in ten_runs.runs:
        ev = evaluate_strategies(run.series, SelectionConfig())
        gaps_universal.append(ev["ema"].gap)
        gaps_last.append(ev["last"].gap)
    mean_universal = float(np.mean(gaps_universal))
    mean_last = float(np.mean(gaps_last))

    monotone_gaps = []
    for series in _monotone_fixtures():
        ev = evaluate_strategies(series, SelectionConfig())
        monotone_gaps.append(ev["ema"].gap)
    elapsed = ten_runs.build_seconds + time.perf_counter() - t0
    ok = (mean_universal <= mean_last
          and all(g == 0.0 for g in monotone_gaps)
          and elapsed < 30.0)
    _report(ok, "universal selection vs last baseline",
            f"mean gap {mean_universal:.5f} <= last baseline {mean_last:.5f}; "
            f"monotone fixture gaps {monotone_gaps} (all must be 0.0) "
            f"in {elapsed:.1f}s (< 30s)")


# ------------------------------------------------------- 5. sweep property


def test_best_sweep_cell_never_worse_than_universal(ten_runs):
    worst_slack = -np.inf
    for run in ten_runs.runs:
        table = sweep_configs(run.series)
        best = table.cell(*table.best_cell).gap
        universal = table.cell(*UNIVERSAL_CELL).gap
        worst_slack = max(worst_slack, best - universal)
    ok = worst_slack <= 0.0
    _report(ok, "per-run best sweep cell vs universal cell",
            f"max(best - universal) gap difference {worst_slack:.5f} over 10 runs "
            "(must be <= 0)")


# ---------------------------------------------------- 6. bootstrap coverage


def test_bootstrap_interval_coverage():
    t0 = time.perf_counter()
    rho = 0.9
    cov = np.array([[1.0, rho], [rho, 1.0]])
    rng = np.random.default_rng(2026)
    trials = 200
    hits = 0
    first_sample = None
    for trial in range(trials):
        xy = rng.multivariate_normal([0.0, 0.0], cov, size=50)
        sample = PairedSample(xy[:, 0], xy[:, 1])
        if first_sample is None:
            first_sample = sample
        ci = bootstrap_ci(sample, n_resamples=10_000, seed=trial)
        hits += ci.low <= rho <= ci.high
    coverage = hits / trials

    rerun_a = bootstrap_ci(first_sample, n_resamples=10_000, seed=123)
    rerun_b = bootstrap_ci(first_sample, n_resamples=10_000, seed=123)
    bytes_a = json.dumps(dataclasses.asdict(rerun_a)).encode()
    bytes_b = json.dumps(dataclasses.asdict(rerun_b)).encode()
    elapsed = time.perf_counter() - t0
    ok = coverage >= 0.90 and bytes_a == bytes_b and elapsed < 120.0
    _report(ok, "bootstrap 95% CI coverage",
            f"covered the true correlation in {hits}/{trials} trials "
            f"({coverage:.1%}, needs >= 90%); identical-seed CI bytes "
            f"{'match' if bytes_a == bytes_b else 'DIFFER'}; {elapsed:.1f}s (< 120s)")


# ------------------------------------------------------- 7. LOO stability


def test_leave_one_out_stability():
    rng = np.random.default_rng(5)
    n = 25
    rho = -0.85
    x = rng.normal(0.0, 1.0, n)
    y = rho * x + np.sqrt(1 - rho**2) * rng.normal(0.0, 1.0, n)
    pool = PairedSample(x, y)
    r, _ = scipy.stats.pearsonr(x, y)
    rep = loo_sensitivity(pool)

    line = np.arange(8.0)
    exact = loo_sensitivity(PairedSample(line, 2 * line - 1))
    ok = (rep.max_abs_shift <= 0.2
          and exact.deltas == [0.0] * 8
          and exact.degenerate_indices == [])
    _report(ok, "leave-one-out stability",
            f"25-point pool (r = {r:.3f}) max |delta r| = {rep.max_abs_shift:.4f} "
            f"(limit 0.2); exact-line deltas all zero: {exact.deltas == [0.0] * 8}")


# --------------------------------------------------- 8. label-free selection


def test_selection_never_reads_the_metric(ten_runs):
    corpus = [run.series for run in ten_runs.runs] + _monotone_fixtures()
    corpus.append(read_series(GOLDEN_SERIES).to_trajectory())
    rng = np.random.default_rng(17)
    mismatches = []
    for k, series in enumerate(corpus):
        base = evaluate_strategies(series, SelectionConfig())
        steps = [r.step for r in series.records]
        scores = [r.score for r in series.records]
        aux = [r.aux_loss for r in series.records]
        metrics = [r.metric for r in series.records]
        zeroed = TrajectorySeries.from_columns(
            steps, scores, [0.0] * len(steps), aux)
        if all(m is not None for m in metrics):
            permuted_col = [metrics[i] for i in rng.permutation(len(metrics))]
        else:
            permuted_col = None
        variants = [zeroed]
        if permuted_col is not None:
            variants.append(TrajectorySeries.from_columns(steps, scores, permuted_col, aux))
        for variant in variants:
            other = evaluate_strategies(variant, SelectionConfig())
            for name in HEAD_GRADIENT_STRATEGIES:
                if other[name].chosen_step != base[name].chosen_step:
                    mismatches.append((k, name))
    ok = not mismatches
    _report(ok, "selection is label-free",
            f"{len(corpus)} series x {len(HEAD_GRADIENT_STRATEGIES)} head-gradient "
            f"strategies unchanged under zeroed/permuted metrics"
            + ("" if ok else f"; mismatches: {mismatches}"))


# ----------------------------------------------------- 9. format round trips


def test_formats_round_trip_byte_identically(ten_runs, tmp_path):
    rng = np.random.default_rng(33)
    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)
    traces = [
        ProbeTraceFile(
            batch=ProbeBatch.classification(
                features=f32(rng.normal(0, 1, (6, 8))),
                head_weights=f32(rng.normal(0, 1, (4, 6))),
                labels=rng.integers(0, 4, 8),
            ),
            step=s, metric=0.1 * s, aux_loss=1.0 / (1 + s),
        )
        for s in (0, 40, 400)
    ]
    traces.append(ProbeTraceFile(
        batch=ProbeBatch.regression(
            features=f32(rng.normal(0, 1, (3, 4))),
            head_weights=f32(rng.normal(0, 1, (2, 3))),
            targets=f32(rng.normal(0, 1, (2, 4))),
        ),
        step=7, metric=None, aux_loss=None,
    ))
    trace_ok = all(
        trace_to_bytes(trace_from_bytes(trace_to_bytes(t))) == trace_to_bytes(t)
        for t in traces
    )

    tables = [SeriesTable.from_trajectory(run.series) for run in ten_runs.runs]
    tables.append(read_series(GOLDEN_SERIES))
    tables.append(SeriesTable(
        steps=[0, 5], scores=[0.3, 0.1], metrics=[None, 0.9],
        aux_losses=[1.2, None], extra_columns=["grad_fro", "entropy"],
        extras={"grad_fro": [0.3, 0.1], "entropy": [1.05, None]},
    ))
    csv_ok = all(
        series_to_csv(series_from_csv(series_to_csv(t))) == series_to_csv(t)
        for t in tables
    )

    report = build_report(
        "selection",
        {"chosen_step": 395, "gap": 0.01, "note": None},
        seed=3, config={"ema_span": 3},
    )
    path_a = tmp_path / "a.json"
    path_b = tmp_path / "b.json"
    write_report(report, str(path_a))
    write_report(read_report(str(path_a)), str(path_b))
    report_ok = path_a.read_bytes() == path_b.read_bytes()

    ok = trace_ok and csv_ok and report_ok
    _report(ok, "format round trips",
            f"binary traces {'ok' if trace_ok else 'FAIL'} ({len(traces)} files), "
            f"series CSV {'ok' if csv_ok else 'FAIL'} ({len(tables)} tables), "
            f"JSON report {'ok' if report_ok else 'FAIL'}")


# --------------------------------------- 10. regression / median aggregation


def test_regression_median_path(tmp_path):
    t0 = time.perf_counter()
    task = RegressionTask(seed=0)
    out_dir = tmp_path / "regrun"
    manifest = make_regression_run(
        task, steps=200, lr=0.02, probe_every=5, out_dir=str(out_dir)
    )
    k_files = {len(entry.files) for entry in manifest.entries}

    _, grouped, errors = load_manifest_traces(str(out_dir / "manifest.json"))
    table = series_from_traces(grouped)
    rho, _ = scipy.stats.spearmanr(table.scores, table.metrics)
    elapsed = time.perf_counter() - t0
    ok = k_files == {3} and not errors and float(rho) < -0.7
    _report(ok, "median-aggregated regression path",
            f"K=3 traces per step across {len(manifest.entries)} steps, "
            f"Spearman rho = {float(rho):.3f} vs held-out negative MSE "
            f"(limit < -0.7) in {elapsed:.1f}s")
