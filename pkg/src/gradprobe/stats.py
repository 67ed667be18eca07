"""Correlation and regression protocol for probe-vs-quality analysis.

Pearson/Spearman point estimates, paired nonparametric bootstrap CIs,
leave-one-out sensitivity, detrended and partial correlations, and OLS
with a step covariate.  All randomized procedures are bit-reproducible
given (seed, n_resamples).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats as sps

PEARSON = "pearson"
SPEARMAN = "spearman"

DEFAULT_RESAMPLES = 10_000


class DegenerateSampleError(ValueError):
    """A statistic is undefined because a variable has zero variance."""


class UnstableBootstrapError(RuntimeError):
    """Too many degenerate resamples for a trustworthy interval."""


class CollinearityError(ValueError):
    """Regression design matrix is rank deficient."""


@dataclass
class PairedSample:
    """Paired observations (x_i, y_i), optionally labeled per point."""

    x: np.ndarray
    y: np.ndarray
    labels: Optional[Sequence[str]] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 1 or self.y.ndim != 1 or self.x.shape != self.y.shape:
            raise ValueError(f"x and y must be equal-length vectors, got {self.x.shape} and {self.y.shape}")
        if self.x.size < 2:
            raise ValueError("need at least 2 paired points")
        if not (np.isfinite(self.x).all() and np.isfinite(self.y).all()):
            raise ValueError("paired sample contains non-finite values")
        if self.labels is not None and len(self.labels) != self.x.size:
            raise ValueError("labels length must match sample size")

    @property
    def n(self) -> int:
        return self.x.size


@dataclass
class BootstrapCI:
    low: float
    high: float
    standard_error: float
    n_resamples: int
    n_degenerate: int
    seed: int


@dataclass
class LooReport:
    """Signed statistic shifts from dropping each point in turn.

    deltas[i] is stat(without point i) - stat(full); None where the reduced
    sample was degenerate.  max_abs_shift ignores the degenerate entries.
    """

    deltas: list
    max_abs_shift: float
    max_shift_index: Optional[int]
    degenerate_indices: list


@dataclass
class CorrelationReport:
    pearson_r: float
    spearman_rho: float
    pearson_ci_low: float
    pearson_ci_high: float
    pearson_se: float
    spearman_ci_low: float
    spearman_ci_high: float
    spearman_se: float
    n: int
    n_resamples: int
    seed: int
    p_value_pearson: Optional[float] = None
    loo_max_shift: Optional[float] = None

    def as_dict(self) -> dict:
        return {
            "pearson_r": self.pearson_r,
            "pearson_ci_low": self.pearson_ci_low,
            "pearson_ci_high": self.pearson_ci_high,
            "pearson_se": self.pearson_se,
            "spearman_rho": self.spearman_rho,
            "spearman_ci_low": self.spearman_ci_low,
            "spearman_ci_high": self.spearman_ci_high,
            "spearman_se": self.spearman_se,
            "n": self.n,
            "n_resamples": self.n_resamples,
            "seed": self.seed,
            "p_value_pearson": self.p_value_pearson,
            "loo_max_shift": self.loo_max_shift,
        }


@dataclass
class RegressionReport:
    intercept: float
    score_coefficient: float
    step_coefficient: float
    r_squared: float
    score_coefficient_t_statistic: float
    partial_correlation_controlling_step: float
    n: int

    def as_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "score_coefficient": self.score_coefficient,
            "step_coefficient": self.step_coefficient,
            "r_squared": self.r_squared,
            "score_coefficient_t_statistic": self.score_coefficient_t_statistic,
            "partial_correlation_controlling_step": self.partial_correlation_controlling_step,
            "n": self.n,
        }


@dataclass
class RankingReport:
    """Entries ordered ascending by score (lowest score ranked first)."""

    names: list
    scores: list
    metrics: list
    order: list = field(default_factory=list)
    spearman_rho: float = 0.0
    best_score_is_best_metric: bool = False

    def as_dict(self) -> dict:
        return {
            "order": self.order,
            "spearman_rho": self.spearman_rho,
            "best_score_is_best_metric": self.best_score_is_best_metric,
            "entries": [
                {"name": n, "score": s, "metric": m}
                for n, s, m in zip(self.names, self.scores, self.metrics)
            ],
        }


def _pearson_arrays(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0:
        raise DegenerateSampleError("x has zero variance")
    if syy == 0.0:
        raise DegenerateSampleError("y has zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def pearson(sample: PairedSample) -> float:
    """Product-moment correlation; degenerate variance raises, never NaN."""
    return _pearson_arrays(sample.x, sample.y)


def _average_ranks(v: np.ndarray) -> np.ndarray:
    return sps.rankdata(v, method="average")


def spearman(sample: PairedSample) -> float:
    """Pearson correlation of average ranks (ties get the mean rank)."""
    return _pearson_arrays(_average_ranks(sample.x), _average_ranks(sample.y))


def _pearson_rows(xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise Pearson r for matching (R, n) matrices.

    Returns (r, degenerate_mask); r is garbage where the mask is set.
    """
    dx = xs - xs.mean(axis=1, keepdims=True)
    dy = ys - ys.mean(axis=1, keepdims=True)
    sxx = (dx * dx).sum(axis=1)
    syy = (dy * dy).sum(axis=1)
    degenerate = (sxx == 0.0) | (syy == 0.0)
    denom = np.sqrt(np.where(degenerate, 1.0, sxx * syy))
    r = (dx * dy).sum(axis=1) / denom
    return np.clip(r, -1.0, 1.0), degenerate


def bootstrap_ci(
    sample: PairedSample,
    statistic: str = PEARSON,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
) -> BootstrapCI:
    """Percentile bootstrap 95% CI, resampling (x_i, y_i) pairs.

    Resamples with zero variance in either coordinate are skipped and
    counted; more than half degenerate raises UnstableBootstrapError.
    """
    if sample.n < 3:
        raise ValueError("bootstrap needs at least 3 paired points")
    if statistic not in (PEARSON, SPEARMAN):
        raise ValueError(f"unknown statistic {statistic!r}")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, sample.n, size=(n_resamples, sample.n))
    xs = sample.x[idx]
    ys = sample.y[idx]
    if statistic == SPEARMAN:
        xs = sps.rankdata(xs, method="average", axis=1)
        ys = sps.rankdata(ys, method="average", axis=1)
    r, degenerate = _pearson_rows(xs, ys)
    kept = r[~degenerate]
    n_degenerate = int(degenerate.sum())
    if n_degenerate > n_resamples // 2:
        raise UnstableBootstrapError(
            f"{n_degenerate}/{n_resamples} degenerate resamples; interval unreliable"
        )
    low, high = np.percentile(kept, [2.5, 97.5])
    return BootstrapCI(
        low=float(max(-1.0, low)),
        high=float(min(1.0, high)),
        standard_error=float(kept.std(ddof=1)) if kept.size > 1 else 0.0,
        n_resamples=n_resamples,
        n_degenerate=n_degenerate,
        seed=seed,
    )


def loo_sensitivity(sample: PairedSample, statistic: str = PEARSON) -> LooReport:
    """Recompute the statistic dropping each point in turn."""
    if sample.n < 4:
        raise ValueError("leave-one-out needs at least 4 points")
    stat = pearson if statistic == PEARSON else spearman
    if statistic not in (PEARSON, SPEARMAN):
        raise ValueError(f"unknown statistic {statistic!r}")
    full = stat(sample)
    deltas: list = []
    degenerate: list = []
    for i in range(sample.n):
        x_i = np.delete(sample.x, i)
        y_i = np.delete(sample.y, i)
        try:
            deltas.append(stat(PairedSample(x_i, y_i)) - full)
        except DegenerateSampleError:
            deltas.append(None)
            degenerate.append(i)
    magnitudes = [(abs(d), i) for i, d in enumerate(deltas) if d is not None]
    if magnitudes:
        max_abs, max_idx = max(magnitudes)
    else:
        max_abs, max_idx = 0.0, None
    return LooReport(
        deltas=deltas,
        max_abs_shift=float(max_abs),
        max_shift_index=max_idx,
        degenerate_indices=degenerate,
    )


def _residualize_on_steps(v: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Residuals of v after least-squares removal of a linear-in-step trend."""
    x = np.column_stack([np.ones_like(steps), steps])
    coef, *_ = np.linalg.lstsq(x, v, rcond=None)
    return v - x @ coef


def detrended_correlation(x, y, steps) -> float:
    """Pearson correlation of the step-detrended residuals of x and y."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    steps = np.asarray(steps, dtype=np.float64)
    if not (x.shape == y.shape == steps.shape) or x.ndim != 1 or x.size < 3:
        raise ValueError("x, y, steps must be equal-length vectors of size >= 3")
    if np.ptp(steps) == 0.0:
        raise DegenerateSampleError("steps are constant; no trend to remove")
    rx = _residualize_on_steps(x, steps)
    ry = _residualize_on_steps(y, steps)
    return _pearson_arrays(rx, ry)


def ols_with_covariate(target, score, steps) -> RegressionReport:
    """Least-squares fit target ~ 1 + score + step via QR.

    Reports coefficients, R^2, the t statistic of the score coefficient,
    and the partial correlation of target and score controlling for step
    (Pearson of the two step-residual series).
    """
    target = np.asarray(target, dtype=np.float64)
    score = np.asarray(score, dtype=np.float64)
    steps = np.asarray(steps, dtype=np.float64)
    n = target.size
    if not (target.shape == score.shape == steps.shape) or target.ndim != 1 or n < 4:
        raise ValueError("target, score, steps must be equal-length vectors of size >= 4")
    design = np.column_stack([np.ones(n), score, steps])
    q, r = np.linalg.qr(design)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-10 * max(diag.max(), 1.0):
        raise CollinearityError("design matrix 1 + score + step is rank deficient")
    beta = np.linalg.solve(r, q.T @ target)
    fitted = design @ beta
    resid = target - fitted
    rss = float(resid @ resid)
    centered = target - target.mean()
    tss = float(centered @ centered)
    if tss == 0.0:
        raise DegenerateSampleError("target has zero variance")
    r_squared = 1.0 - rss / tss
    # covariance of beta from R: (X^T X)^-1 = R^-1 R^-T
    r_inv = np.linalg.solve(r, np.eye(3))
    xtx_inv = r_inv @ r_inv.T
    sigma2 = rss / (n - 3)
    se_score = math.sqrt(max(sigma2 * xtx_inv[1, 1], 0.0))
    t_score = beta[1] / se_score if se_score > 0 else math.inf * np.sign(beta[1])
    partial = detrended_correlation(target, score, steps)
    return RegressionReport(
        intercept=float(beta[0]),
        score_coefficient=float(beta[1]),
        step_coefficient=float(beta[2]),
        r_squared=float(r_squared),
        score_coefficient_t_statistic=float(t_score),
        partial_correlation_controlling_step=float(partial),
        n=n,
    )


def pearson_p_value(r: float, n: int) -> float:
    """Two-sided p-value for Pearson r via the t distribution, n-2 dof."""
    if n < 3:
        raise ValueError("p-value needs n >= 3")
    if abs(r) >= 1.0:
        return 0.0
    t = abs(r) * math.sqrt((n - 2) / (1.0 - r * r))
    return float(2.0 * sps.t.sf(t, n - 2))


def rank_models(entries: Sequence[tuple]) -> RankingReport:
    """Rank (name, score, metric) entries ascending by score.

    Reports Spearman rho between score and metric ranks and whether the
    lowest-score entry is also the highest-metric entry.
    """
    if len(entries) < 2:
        raise ValueError("ranking needs at least 2 entries")
    names = [str(e[0]) for e in entries]
    scores = [float(e[1]) for e in entries]
    metrics = [float(e[2]) for e in entries]
    order = sorted(range(len(entries)), key=lambda i: (scores[i], names[i]))
    rho = spearman(PairedSample(np.array(scores), np.array(metrics)))
    best_score_i = order[0]
    best_metric_i = int(np.argmax(metrics))
    return RankingReport(
        names=names,
        scores=scores,
        metrics=metrics,
        order=[names[i] for i in order],
        spearman_rho=rho,
        best_score_is_best_metric=(best_score_i == best_metric_i),
    )


def correlation_report(
    sample: PairedSample,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    with_loo: bool = True,
    with_p_value: bool = True,
) -> CorrelationReport:
    """Point estimates, bootstrap CIs, and optional LOO / p-value in one shot."""
    r = pearson(sample)
    rho = spearman(sample)
    ci_r = bootstrap_ci(sample, PEARSON, n_resamples, seed)
    ci_rho = bootstrap_ci(sample, SPEARMAN, n_resamples, seed)
    loo = loo_sensitivity(sample, PEARSON) if with_loo and sample.n >= 4 else None
    return CorrelationReport(
        pearson_r=r,
        spearman_rho=rho,
        pearson_ci_low=ci_r.low,
        pearson_ci_high=ci_r.high,
        pearson_se=ci_r.standard_error,
        spearman_ci_low=ci_rho.low,
        spearman_ci_high=ci_rho.high,
        spearman_se=ci_rho.standard_error,
        n=sample.n,
        n_resamples=n_resamples,
        seed=seed,
        p_value_pearson=pearson_p_value(r, sample.n) if with_p_value else None,
        loo_max_shift=loo.max_abs_shift if loo is not None else None,
    )
