"""Request/response models for the HTTP service."""

from typing import Optional

from pydantic import BaseModel

from gradprobe._version import __version__


class HealthResponse(BaseModel):
    status: str = "ok"
    tool: str = "gradprobe"
    version: str = __version__


class ProbeArraysRequest(BaseModel):
    """One checkpoint batch as plain nested lists.

    features is d x B (one column per example), head_weights is C x d;
    classification mode takes labels (length B), regression mode takes
    targets (C x B).
    """

    mode: str = "classification"
    features: list[list[float]]
    head_weights: list[list[float]]
    labels: Optional[list[int]] = None
    targets: Optional[list[list[float]]] = None
    eps_z: float = 1e-12
    eps_w: float = 1e-12


class ProbeResponse(BaseModel):
    mode: str
    n_outputs: int
    feature_dim: int
    batch_size: int
    grad_fro: float
    grad_l1: float
    grad_linf: float
    score_z: float
    score_w: float
    loss: float
    fisher_trace: Optional[float] = None
    confidence: Optional[float] = None
    entropy: Optional[float] = None
    margin: Optional[float] = None


class TraceProbeResponse(ProbeResponse):
    step: int
    metric: Optional[float] = None
    aux_loss: Optional[float] = None


class SeriesRow(BaseModel):
    step: int
    score: float
    metric: Optional[float] = None
    aux_loss: Optional[float] = None


class SelectionOptions(BaseModel):
    """Selection knobs; defaults are the universal configuration."""

    ema_span: Optional[int] = None
    ema_beta: Optional[float] = None
    tail_size: Optional[int] = None
    tail_fraction: Optional[float] = None
    quantile: float = 0.1
    patience: int = 3
    max_lag: int = 10
    repeats: int = 1


class SelectRequest(BaseModel):
    rows: list[SeriesRow]
    options: SelectionOptions = SelectionOptions()
    higher_is_better: bool = True
    run_id: Optional[str] = None


class SweepRequest(BaseModel):
    rows: list[SeriesRow]
    grid: Optional[list[tuple[int, int]]] = None
    higher_is_better: bool = True


class CorrelateRequest(BaseModel):
    """Paired score/metric observations, optionally with their steps.

    Steps (all distinct, >= 4 points) switch on the regression protocol
    with step as a covariate.
    """

    x: list[float]
    y: list[float]
    steps: Optional[list[int]] = None
    n_resamples: int = 10000
    seed: int = 0


class RankEntry(BaseModel):
    name: str
    score: float
    metric: float


class RankRequest(BaseModel):
    entries: list[RankEntry]


class ScatterRequest(BaseModel):
    x: list[float]
    y: list[float]
    log10_x: bool = False
    x_label: str = "score"
    y_label: str = "metric"
    title: str = ""
    lower_is_better_x: bool = False
    lower_is_better_y: bool = False
