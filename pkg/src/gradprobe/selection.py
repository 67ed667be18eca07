"""Validation-free checkpoint selection over probe-score trajectories.

A trajectory is a step-ordered list of (step, score, metric?, aux_loss?)
records.  Selection smooths the score with an EMA, restricts attention to
a tail window, and picks a step by one of several strategies (argmin,
quantile + patience, lead-lag shifted) alongside baselines (last record,
loss minimum) and the metric oracle used only for gap reporting.

Scores are oriented so that lower is better; callers negate
higher-is-better readouts before building a trajectory.
"""

from __future__ import annotations

import dataclasses
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

STRATEGY_RAW = "raw"
STRATEGY_EMA = "ema"
STRATEGY_QUANTILE = "quantile"
STRATEGY_QUANTILE_PATIENCE = "quantile_patience"
STRATEGY_LEAD_LAG = "lead_lag"
STRATEGY_LAST = "last"
STRATEGY_LOSS_MIN = "loss_min"
STRATEGY_ORACLE = "oracle"

HEAD_GRADIENT_STRATEGIES = (
    STRATEGY_RAW,
    STRATEGY_EMA,
    STRATEGY_QUANTILE,
    STRATEGY_QUANTILE_PATIENCE,
    STRATEGY_LEAD_LAG,
)

ALL_STRATEGIES = HEAD_GRADIENT_STRATEGIES + (
    STRATEGY_LAST,
    STRATEGY_LOSS_MIN,
    STRATEGY_ORACLE,
)

DEFAULT_EMA_SPAN = 3
DEFAULT_TAIL_SIZE = 80
DEFAULT_TAIL_FRACTION = 0.2
DEFAULT_QUANTILE = 0.1
DEFAULT_PATIENCE = 3
DEFAULT_MAX_LAG = 10

# sweep grid: EMA span x tail size
DEFAULT_GRID = tuple((k, s) for k in (1, 3, 5, 9) for s in (60, 80, 100))
UNIVERSAL_CELL = (DEFAULT_EMA_SPAN, DEFAULT_TAIL_SIZE)


class SelectionConfigError(ValueError):
    """Invalid or conflicting selection parameters."""


@dataclass
class SelectionConfig:
    """Knobs for smoothing, windowing, and candidate filtering.

    Exactly one of (ema_span, ema_beta) may be given; span k maps to
    decay beta = 1 - 2/(k + 1), so k = 1 means no smoothing.  Exactly
    one of (tail_size, tail_fraction) governs the window; with neither,
    tail_size defaults to 80.
    """

    ema_span: Optional[int] = None
    ema_beta: Optional[float] = None
    tail_size: Optional[int] = None
    tail_fraction: Optional[float] = None
    quantile: float = DEFAULT_QUANTILE
    patience: int = DEFAULT_PATIENCE
    max_lag: int = DEFAULT_MAX_LAG
    repeats: int = 1

    def __post_init__(self):
        if self.ema_span is not None and self.ema_beta is not None:
            raise SelectionConfigError("give ema_span or ema_beta, not both")
        if self.ema_span is None and self.ema_beta is None:
            self.ema_span = DEFAULT_EMA_SPAN
        if self.ema_span is not None and self.ema_span < 1:
            raise SelectionConfigError(f"ema_span must be >= 1, got {self.ema_span}")
        if self.ema_beta is not None and not 0.0 <= self.ema_beta < 1.0:
            raise SelectionConfigError(f"ema_beta must be in [0, 1), got {self.ema_beta}")
        if self.tail_size is not None and self.tail_fraction is not None:
            raise SelectionConfigError("give tail_size or tail_fraction, not both")
        if self.tail_size is None and self.tail_fraction is None:
            self.tail_size = DEFAULT_TAIL_SIZE
        if self.tail_size is not None and self.tail_size < 1:
            raise SelectionConfigError(f"tail_size must be >= 1, got {self.tail_size}")
        if self.tail_fraction is not None and not 0.0 < self.tail_fraction <= 1.0:
            raise SelectionConfigError(
                f"tail_fraction must be in (0, 1], got {self.tail_fraction}"
            )
        if not 0.0 < self.quantile <= 1.0:
            raise SelectionConfigError(f"quantile must be in (0, 1], got {self.quantile}")
        if self.patience < 0:
            raise SelectionConfigError(f"patience must be >= 0, got {self.patience}")
        if self.max_lag < 0:
            raise SelectionConfigError(f"max_lag must be >= 0, got {self.max_lag}")
        if self.repeats < 1:
            raise SelectionConfigError(f"repeats must be >= 1, got {self.repeats}")

    @property
    def beta(self) -> float:
        if self.ema_beta is not None:
            return self.ema_beta
        return 1.0 - 2.0 / (self.ema_span + 1)

    def replace(self, **changes) -> "SelectionConfig":
        # span/beta and size/fraction are exclusive pairs: changing one
        # side must drop the stored value on the other.
        base = {
            "ema_span": self.ema_span,
            "ema_beta": self.ema_beta,
            "tail_size": self.tail_size,
            "tail_fraction": self.tail_fraction,
            "quantile": self.quantile,
            "patience": self.patience,
            "max_lag": self.max_lag,
            "repeats": self.repeats,
        }
        if "ema_span" in changes and "ema_beta" not in changes:
            base["ema_beta"] = None
        if "ema_beta" in changes and "ema_span" not in changes:
            base["ema_span"] = None
        if "tail_size" in changes and "tail_fraction" not in changes:
            base["tail_fraction"] = None
        if "tail_fraction" in changes and "tail_size" not in changes:
            base["tail_size"] = None
        base.update(changes)
        return SelectionConfig(**base)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrajectoryRecord:
    step: int
    score: float
    metric: Optional[float] = None
    aux_loss: Optional[float] = None


class TrajectoryError(ValueError):
    """Malformed trajectory (ordering, emptiness, non-finite scores)."""


@dataclass
class TrajectorySeries:
    """Step-ordered probe records for one training run."""

    records: list
    run_id: Optional[str] = None

    def __post_init__(self):
        if not self.records:
            raise TrajectoryError("trajectory must contain at least one record")
        prev = None
        for i, rec in enumerate(self.records):
            if prev is not None and rec.step <= prev:
                raise TrajectoryError(
                    f"steps must be strictly increasing: record {i} has step "
                    f"{rec.step} after {prev}"
                )
            prev = rec.step
            if not math.isfinite(rec.score):
                raise TrajectoryError(f"record {i} (step {rec.step}) has non-finite score")
            for name in ("metric", "aux_loss"):
                v = getattr(rec, name)
                if v is not None and not math.isfinite(v):
                    raise TrajectoryError(
                        f"record {i} (step {rec.step}) has non-finite {name}"
                    )

    @classmethod
    def from_columns(cls, steps, scores, metrics=None, aux_losses=None, run_id=None):
        n = len(steps)
        if len(scores) != n:
            raise TrajectoryError("steps and scores must have equal length")
        for name, col in (("metrics", metrics), ("aux_losses", aux_losses)):
            if col is not None and len(col) != n:
                raise TrajectoryError(f"{name} column length mismatch")
        records = []
        for i in range(n):
            records.append(
                TrajectoryRecord(
                    step=int(steps[i]),
                    score=float(scores[i]),
                    metric=None if metrics is None or metrics[i] is None else float(metrics[i]),
                    aux_loss=None
                    if aux_losses is None or aux_losses[i] is None
                    else float(aux_losses[i]),
                )
            )
        return cls(records=records, run_id=run_id)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def steps(self) -> np.ndarray:
        return np.array([r.step for r in self.records], dtype=np.int64)

    @property
    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.records], dtype=np.float64)

    def metric_values(self, indices) -> Optional[np.ndarray]:
        """Metric column over `indices`, or None if any entry is absent."""
        vals = [self.records[i].metric for i in indices]
        if any(v is None for v in vals):
            return None
        return np.array(vals, dtype=np.float64)

    def aux_values(self, indices) -> Optional[np.ndarray]:
        vals = [self.records[i].aux_loss for i in indices]
        if any(v is None for v in vals):
            return None
        return np.array(vals, dtype=np.float64)

    def without_metric(self) -> "TrajectorySeries":
        """Copy with every metric field deleted (label-free view)."""
        return TrajectorySeries(
            records=[
                TrajectoryRecord(r.step, r.score, None, r.aux_loss) for r in self.records
            ],
            run_id=self.run_id,
        )


@dataclass
class SelectionResult:
    strategy_name: str
    chosen_step: int
    chosen_index: int
    window_start: int
    window_stop: int
    smoothed_series: Optional[list] = None
    candidate_set: list = field(default_factory=list)
    gap: Optional[float] = None
    oracle_step: Optional[int] = None
    lag: Optional[int] = None
    warning: bool = False

    def as_dict(self) -> dict:
        return {
            "strategy": self.strategy_name,
            "chosen_step": self.chosen_step,
            "chosen_index": self.chosen_index,
            "window_start": self.window_start,
            "window_stop": self.window_stop,
            "candidate_steps": list(self.candidate_set),
            "gap": self.gap,
            "oracle_step": self.oracle_step,
            "lag": self.lag,
            "warning": self.warning,
        }


@dataclass
class LagResult:
    lag: int
    correlation: float
    warning: bool = False


def ema_smooth(series: Sequence[float], config: SelectionConfig) -> list:
    """Exponential moving average s_t = beta*s_{t-1} + (1-beta)*x_t, s_0 = x_0."""
    if len(series) == 0:
        raise ValueError("cannot smooth an empty series")
    beta = config.beta
    if beta == 0.0:
        return [float(v) for v in series]
    out = [float(series[0])]
    for v in series[1:]:
        out.append(beta * out[-1] + (1.0 - beta) * float(v))
    return out


def tail_window(series: TrajectorySeries, config: SelectionConfig) -> range:
    """Index range of the last `tail_size` records (or ceil(fraction*n))."""
    n = len(series)
    if config.tail_size is not None:
        width = config.tail_size
    else:
        width = math.ceil(config.tail_fraction * n)
    width = min(max(width, 1), n)
    return range(n - width, n)


def _argmin_earliest(values: np.ndarray) -> int:
    # np.argmin already returns the first occurrence on ties
    return int(np.argmin(values))


def select_argmin(series: TrajectorySeries, config: SelectionConfig) -> SelectionResult:
    """Earliest minimum of the EMA-smoothed score inside the tail window."""
    smoothed = ema_smooth(series.scores, config)
    window = tail_window(series, config)
    local = _argmin_earliest(np.asarray(smoothed)[window.start : window.stop])
    idx = window.start + local
    name = STRATEGY_RAW if config.beta == 0.0 else STRATEGY_EMA
    return SelectionResult(
        strategy_name=name,
        chosen_step=series.records[idx].step,
        chosen_index=idx,
        window_start=window.start,
        window_stop=window.stop,
        smoothed_series=smoothed,
    )


def _quantile_threshold(window_values: np.ndarray, q: float) -> float:
    """Nearest-rank quantile: the ceil(q*m)-th smallest observed value."""
    m = window_values.size
    rank = min(max(math.ceil(q * m), 1), m)
    return float(np.sort(window_values, kind="stable")[rank - 1])


def select_quantile_patience(
    series: TrajectorySeries, config: SelectionConfig
) -> SelectionResult:
    """Quantile candidates, resolved by patience.

    The candidate set holds window records whose smoothed score is at or
    below the nearest-rank q-quantile of the smoothed window scores.  The
    chosen record is the earliest candidate that stays in the set for
    `patience` consecutive probe records (a patience of 0 or 1 accepts
    the earliest candidate outright); runs are not extended past the end
    of the window, and when no candidate survives its patience run the
    selection falls back to the window argmin.
    """
    smoothed = ema_smooth(series.scores, config)
    window = tail_window(series, config)
    win_vals = np.asarray(smoothed)[window.start : window.stop]
    threshold = _quantile_threshold(win_vals, config.quantile)
    in_set = win_vals <= threshold
    candidates = [window.start + int(i) for i in np.flatnonzero(in_set)]
    need = max(config.patience, 1)
    chosen = None
    for idx in candidates:
        end = idx + need
        if end > window.stop:
            continue
        if all(in_set[j - window.start] for j in range(idx, end)):
            chosen = idx
            break
    if chosen is None:
        chosen = window.start + _argmin_earliest(win_vals)
    name = STRATEGY_QUANTILE if config.patience <= 1 else STRATEGY_QUANTILE_PATIENCE
    return SelectionResult(
        strategy_name=name,
        chosen_step=series.records[chosen].step,
        chosen_index=chosen,
        window_start=window.start,
        window_stop=window.stop,
        smoothed_series=smoothed,
        candidate_set=[series.records[i].step for i in candidates],
    )


# improvements below this are numerical noise; the shorter lag keeps the tie
_LAG_TIE_TOL = 1e-12


def best_lag(score: Sequence[float], other: Sequence[float], max_lag: int) -> LagResult:
    """Lag in [-max_lag, max_lag] maximizing |Pearson r| on the overlap.

    A lag of +L pairs score[t-L] with other[t] (the score leads).  Ties
    resolve toward lag 0, then toward the positive lag.  Overlaps shorter
    than 3 points, and overlaps where either side is constant, are
    skipped; if nothing remains the result is lag 0 with a warning flag.
    """
    x = np.asarray(score, dtype=np.float64)
    y = np.asarray(other, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("score and other must be equal-length vectors")
    n = x.size
    best = LagResult(lag=0, correlation=0.0, warning=True)
    found = False
    for lag in sorted(range(-max_lag, max_lag + 1), key=lambda l: (abs(l), l < 0)):
        if lag >= 0:
            a, b = x[: n - lag], y[lag:]
        else:
            a, b = x[-lag:], y[: n + lag]
        if a.size < 3:
            continue
        da = a - a.mean()
        db = b - b.mean()
        denom = math.sqrt(float(da @ da) * float(db @ db))
        if denom == 0.0:
            continue
        r = float(da @ db) / denom
        if not found or abs(r) > abs(best.correlation) + _LAG_TIE_TOL:
            best = LagResult(lag=lag, correlation=r, warning=False)
            found = True
    return best


def median_aggregate(repeated_scores: Sequence[Sequence[float]]) -> list:
    """Pointwise median across K repeated score series (midpoint on even K)."""
    if len(repeated_scores) == 0:
        raise ValueError("need at least one series to aggregate")
    length = len(repeated_scores[0])
    for i, s in enumerate(repeated_scores):
        if len(s) != length:
            raise ValueError(f"series {i} has length {len(s)}, expected {length}")
    if len(repeated_scores) == 1:
        return [float(v) for v in repeated_scores[0]]
    stacked = np.asarray(repeated_scores, dtype=np.float64)
    return [float(v) for v in np.median(stacked, axis=0)]


def _oracle_index(metric: np.ndarray, offset: int, higher_is_better: bool) -> int:
    if higher_is_better:
        return offset + int(np.argmax(metric))
    return offset + _argmin_earliest(metric)


def _gap(m_oracle: float, m_chosen: float, higher_is_better: bool) -> float:
    return (m_oracle - m_chosen) if higher_is_better else (m_chosen - m_oracle)


class StrategyEvaluation(Mapping):
    """Strategy-name → SelectionResult map, plus oracle bookkeeping.

    gap values are measured against the tail-window oracle;
    oracle_step_global records the whole-series optimum separately.
    """

    def __init__(
        self,
        results: dict,
        higher_is_better: bool,
        oracle_step: Optional[int] = None,
        oracle_step_global: Optional[int] = None,
    ):
        self._results = results
        self.higher_is_better = higher_is_better
        self.oracle_step = oracle_step
        self.oracle_step_global = oracle_step_global

    def __getitem__(self, key: str) -> SelectionResult:
        return self._results[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._results)

    def __len__(self) -> int:
        return len(self._results)

    def as_dict(self) -> dict:
        return {
            "higher_is_better": self.higher_is_better,
            "oracle_step": self.oracle_step,
            "oracle_step_global": self.oracle_step_global,
            "strategies": {name: res.as_dict() for name, res in self._results.items()},
        }


def evaluate_strategies(
    series: TrajectorySeries,
    config: SelectionConfig,
    higher_is_better: bool = True,
) -> StrategyEvaluation:
    """Run every selection strategy and report gaps to the tail oracle.

    Head-gradient strategies (raw/ema/quantile/quantile_patience/lead_lag)
    read only scores and, for lag alignment, the aux loss — never the
    metric, which feeds the oracle and the gap column alone.  Baselines:
    `last` takes the final record, `loss_min` the window's aux-loss
    minimum (omitted when the aux loss is incomplete there).  The oracle
    strategy is omitted, and gaps are None, when the metric is incomplete
    over the window.
    """
    window = tail_window(series, config)
    win_idx = list(window)
    smoothed = ema_smooth(series.scores, config)

    results: dict = {}
    results[STRATEGY_RAW] = dataclasses.replace(
        select_argmin(series, config.replace(ema_span=1)), strategy_name=STRATEGY_RAW
    )
    results[STRATEGY_EMA] = dataclasses.replace(
        select_argmin(series, config), strategy_name=STRATEGY_EMA
    )
    results[STRATEGY_QUANTILE] = dataclasses.replace(
        select_quantile_patience(series, config.replace(patience=0)),
        strategy_name=STRATEGY_QUANTILE,
    )
    results[STRATEGY_QUANTILE_PATIENCE] = dataclasses.replace(
        select_quantile_patience(series, config),
        strategy_name=STRATEGY_QUANTILE_PATIENCE,
    )

    # lead-lag: shift the smoothed argmin by the lag that best aligns the
    # raw score with the aux loss (a label-free companion series)
    base = results[STRATEGY_EMA]
    aux_all = series.aux_values(range(len(series)))
    if aux_all is not None and len(series) >= 3:
        effective_lag = min(config.max_lag, len(series) - 2)
        lag_res = best_lag(series.scores, aux_all, effective_lag)
    else:
        lag_res = LagResult(lag=0, correlation=0.0, warning=True)
    shifted = min(max(base.chosen_index + lag_res.lag, window.start), window.stop - 1)
    results[STRATEGY_LEAD_LAG] = SelectionResult(
        strategy_name=STRATEGY_LEAD_LAG,
        chosen_step=series.records[shifted].step,
        chosen_index=shifted,
        window_start=window.start,
        window_stop=window.stop,
        smoothed_series=smoothed,
        lag=lag_res.lag,
        warning=lag_res.warning,
    )

    last_idx = len(series) - 1
    results[STRATEGY_LAST] = SelectionResult(
        strategy_name=STRATEGY_LAST,
        chosen_step=series.records[last_idx].step,
        chosen_index=last_idx,
        window_start=window.start,
        window_stop=window.stop,
    )

    aux_win = series.aux_values(win_idx)
    if aux_win is not None:
        idx = window.start + _argmin_earliest(aux_win)
        results[STRATEGY_LOSS_MIN] = SelectionResult(
            strategy_name=STRATEGY_LOSS_MIN,
            chosen_step=series.records[idx].step,
            chosen_index=idx,
            window_start=window.start,
            window_stop=window.stop,
        )

    metric_win = series.metric_values(win_idx)
    oracle_step = None
    oracle_step_global = None
    if metric_win is not None:
        oracle_idx = _oracle_index(metric_win, window.start, higher_is_better)
        oracle_step = series.records[oracle_idx].step
        m_oracle = series.records[oracle_idx].metric
        results[STRATEGY_ORACLE] = SelectionResult(
            strategy_name=STRATEGY_ORACLE,
            chosen_step=oracle_step,
            chosen_index=oracle_idx,
            window_start=window.start,
            window_stop=window.stop,
            gap=0.0,
            oracle_step=oracle_step,
        )
        for name, res in results.items():
            if name == STRATEGY_ORACLE:
                continue
            m_chosen = series.records[res.chosen_index].metric
            res.oracle_step = oracle_step
            if m_chosen is not None:
                res.gap = _gap(m_oracle, m_chosen, higher_is_better)
        metric_all = series.metric_values(range(len(series)))
        if metric_all is not None:
            g_idx = _oracle_index(metric_all, 0, higher_is_better)
            oracle_step_global = series.records[g_idx].step

    return StrategyEvaluation(
        results,
        higher_is_better=higher_is_better,
        oracle_step=oracle_step,
        oracle_step_global=oracle_step_global,
    )


@dataclass
class SweepCell:
    ema_span: int
    tail_size: int
    chosen_step: int
    metric: Optional[float]
    gap: Optional[float]

    def as_dict(self) -> dict:
        return {
            "ema_span": self.ema_span,
            "tail_size": self.tail_size,
            "chosen_step": self.chosen_step,
            "metric": self.metric,
            "gap": self.gap,
        }


@dataclass
class SweepTable:
    cells: list
    universal_cell: tuple
    best_cell: Optional[tuple]
    oracle_step: Optional[int]

    def cell(self, ema_span: int, tail_size: int) -> SweepCell:
        for c in self.cells:
            if c.ema_span == ema_span and c.tail_size == tail_size:
                return c
        raise KeyError(f"no sweep cell ({ema_span}, {tail_size})")

    def as_dict(self) -> dict:
        return {
            "universal_cell": list(self.universal_cell),
            "best_cell": list(self.best_cell) if self.best_cell else None,
            "oracle_step": self.oracle_step,
            "cells": [c.as_dict() for c in self.cells],
        }


def sweep_configs(
    series: TrajectorySeries,
    grid: Optional[Sequence[tuple]] = None,
    higher_is_better: bool = True,
    base_config: Optional[SelectionConfig] = None,
) -> SweepTable:
    """Smoothed-argmin gap for every (ema_span, tail_size) grid cell.

    Window width varies across cells, so gaps use one common reference:
    the whole-series oracle.  The best cell is the first minimal-gap cell
    in grid order; without metrics, gaps are None and no best is named.
    """
    cells_spec = list(grid) if grid is not None else list(DEFAULT_GRID)
    base = base_config if base_config is not None else SelectionConfig()
    metric_all = series.metric_values(range(len(series)))
    oracle_step = None
    m_oracle = None
    if metric_all is not None:
        g_idx = _oracle_index(metric_all, 0, higher_is_better)
        oracle_step = series.records[g_idx].step
        m_oracle = series.records[g_idx].metric
    cells = []
    for k, s in cells_spec:
        res = select_argmin(series, base.replace(ema_span=k, tail_size=s))
        m_chosen = series.records[res.chosen_index].metric
        gap = None
        if m_oracle is not None and m_chosen is not None:
            gap = _gap(m_oracle, m_chosen, higher_is_better)
        cells.append(
            SweepCell(
                ema_span=k,
                tail_size=s,
                chosen_step=res.chosen_step,
                metric=m_chosen,
                gap=gap,
            )
        )
    best = None
    scored = [(c.gap, i) for i, c in enumerate(cells) if c.gap is not None]
    if scored:
        _, best_i = min(scored)
        best = (cells[best_i].ema_span, cells[best_i].tail_size)
    return SweepTable(
        cells=cells,
        universal_cell=UNIVERSAL_CELL,
        best_cell=best,
        oracle_step=oracle_step,
    )
