"""Desk-scale data generators with exact ground truth.

Two kinds of synthetic evidence:

* a latent-state simulator: one hidden monotone-plus-noise path S(t)
  projected into several noisy readout columns (gradient-like readouts
  fall as S rises, accuracy-like readouts rise with it);
* tiny full-batch gradient-descent trainers (softmax head on Gaussian
  clusters; linear regression head on noisy targets) that write genuine
  binary probe traces per checkpoint together with an exactly computed
  held-out metric.

Everything is bit-reproducible from its seed: one generator per run,
draws in a fixed order, no global random state.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from gradprobe.probe import CLASSIFICATION, REGRESSION, ProbeBatch, cross_entropy, softmax_columns
from gradprobe.traceio import (
    ManifestEntry,
    ProbeTraceFile,
    RunManifest,
    SeriesTable,
    write_manifest,
    write_trace,
)


class TrainingDivergedError(RuntimeError):
    """Training loss left the finite range; the run was aborted."""


@dataclass
class ReadoutSpec:
    """One noisy affine projection of the latent path.

    value_t = offset + sign * scale * S_{t - lag} + noise.  Readouts
    named after a series column (score/metric/aux_loss) land there; any
    other name becomes an extra column.
    """

    name: str
    sign: int
    scale: float
    offset: float = 0.0
    noise_scale: float = 0.0
    lag: int = 0

    def __post_init__(self):
        if self.sign not in (-1, 1):
            raise ValueError(f"sign must be -1 or +1, got {self.sign}")
        if self.noise_scale < 0:
            raise ValueError(f"noise_scale must be >= 0, got {self.noise_scale}")


@dataclass
class LatentStateModel:
    """Hidden training-progress path and its observable projections.

    The deterministic part of the path rises from 0 and saturates at
    `drift` with time constant `plateau_step`; per-step Gaussian noise
    of scale `noise_scale` is added on top.
    """

    drift: float = 1.0
    noise_scale: float = 0.02
    plateau_step: float = 150.0
    readouts: list = field(default_factory=list)

    def __post_init__(self):
        if self.noise_scale < 0:
            raise ValueError(f"noise_scale must be >= 0, got {self.noise_scale}")
        if self.plateau_step <= 0:
            raise ValueError(f"plateau_step must be > 0, got {self.plateau_step}")


def default_latent_model() -> LatentStateModel:
    """A model with one readout per column the probe itself emits."""
    return LatentStateModel(
        readouts=[
            ReadoutSpec("score", sign=-1, scale=0.8, offset=1.0, noise_scale=0.02),
            ReadoutSpec("metric", sign=+1, scale=0.6, offset=0.3, noise_scale=0.02),
            ReadoutSpec("aux_loss", sign=-1, scale=1.6, offset=2.0, noise_scale=0.02),
            ReadoutSpec("confidence", sign=+1, scale=0.5, offset=0.4, noise_scale=0.02),
            ReadoutSpec("entropy", sign=-1, scale=1.4, offset=1.6, noise_scale=0.02),
            ReadoutSpec("margin", sign=+1, scale=0.7, offset=0.05, noise_scale=0.02),
        ]
    )


def simulate_readouts(model: LatentStateModel, n_steps: int, seed: int = 0) -> SeriesTable:
    """Latent path plus every readout column, deterministic given seed."""
    if n_steps < 2:
        raise ValueError(f"need n_steps >= 2, got {n_steps}")
    for r in model.readouts:
        if abs(r.lag) >= n_steps:
            raise ValueError(f"readout {r.name!r} lag {r.lag} exceeds the path length")
    rng = np.random.default_rng(seed)
    t = np.arange(n_steps, dtype=np.float64)
    s_det = model.drift * (1.0 - np.exp(-t / model.plateau_step))
    s = s_det + rng.normal(0.0, model.noise_scale, n_steps)
    columns: dict = {}
    for r in model.readouts:
        idx = np.clip(t.astype(np.int64) - r.lag, 0, n_steps - 1)
        values = r.offset + r.sign * r.scale * s[idx]
        if r.noise_scale > 0:
            values = values + rng.normal(0.0, r.noise_scale, n_steps)
        columns[r.name] = values
    if "score" not in columns:
        raise ValueError("model must define a readout named 'score'")
    extra_names = ["latent_state"] + [
        r.name for r in model.readouts if r.name not in ("score", "metric", "aux_loss")
    ]
    extras = {"latent_state": [float(v) for v in s]}
    for name in extra_names[1:]:
        extras[name] = [float(v) for v in columns[name]]
    n = n_steps

    def col(name):
        if name in columns:
            return [float(v) for v in columns[name]]
        return [None] * n

    return SeriesTable(
        steps=list(range(n_steps)),
        scores=[float(v) for v in columns["score"]],
        metrics=col("metric"),
        aux_losses=col("aux_loss"),
        extra_columns=extra_names,
        extras=extras,
    )


@dataclass
class SyntheticTask:
    """Gaussian-cluster classification task for the linear-head trainer."""

    n_classes: int = 5
    feature_dim: int = 20
    train_size: int = 256
    holdout_size: int = 512
    probe_batch: int = 64
    center_scale: float = 1.2
    spread: float = 1.0
    label_noise: float = 0.05
    seed: int = 0
    centers: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.n_classes}")
        if min(self.train_size, self.holdout_size) < self.n_classes:
            raise ValueError("train and holdout sizes must each be >= n_classes")
        if not 1 <= self.probe_batch <= self.train_size:
            raise ValueError("probe_batch must be in [1, train_size]")
        if self.spread <= 0:
            raise ValueError(f"spread must be > 0, got {self.spread}")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError(f"label_noise must be in [0, 1], got {self.label_noise}")
        if self.centers is not None:
            self.centers = np.asarray(self.centers, dtype=np.float64)
            if self.centers.shape != (self.n_classes, self.feature_dim):
                raise ValueError(
                    f"centers must be ({self.n_classes}, {self.feature_dim}), "
                    f"got {self.centers.shape}"
                )


@dataclass
class SampledDataset:
    x_train: np.ndarray  # (d, n_train)
    y_train: np.ndarray  # noisy training labels
    x_hold: np.ndarray
    y_hold: np.ndarray  # clean held-out labels
    probe_index: np.ndarray  # fixed probe-batch columns of x_train


def _balanced_labels(rng, n: int, c: int) -> np.ndarray:
    labels = np.arange(n, dtype=np.int64) % c
    return labels[rng.permutation(n)]


def sample_dataset(task: SyntheticTask) -> SampledDataset:
    """Draw the task's train/held-out splits and the fixed probe batch.

    Label noise (uniform relabeling) is applied to training labels only,
    so the held-out metric stays an exact measure of the true classes.
    """
    rng = np.random.default_rng(task.seed)
    c, d = task.n_classes, task.feature_dim
    centers = (
        task.centers
        if task.centers is not None
        else rng.normal(0.0, task.center_scale, (c, d))
    )
    y_train = _balanced_labels(rng, task.train_size, c)
    x_train = centers[y_train].T + task.spread * rng.normal(0.0, 1.0, (d, task.train_size))
    y_hold = _balanced_labels(rng, task.holdout_size, c)
    x_hold = centers[y_hold].T + task.spread * rng.normal(0.0, 1.0, (d, task.holdout_size))
    probe_index = rng.choice(task.train_size, size=task.probe_batch, replace=False)
    # flips drawn last: the noise knob perturbs nothing but y_train
    if task.label_noise > 0:
        flip = rng.random(task.train_size) < task.label_noise
        y_train = y_train.copy()
        y_train[flip] = rng.integers(0, c, int(flip.sum()))
    return SampledDataset(x_train, y_train, x_hold, y_hold, probe_index)


def stability_bound(features: np.ndarray) -> float:
    """Largest safe step size for full-batch descent on these features.

    Softmax cross-entropy over n examples has curvature at most
    lam_max(X X^T / n) / 2, so plain gradient descent contracts for
    lr < 4 / lam_max(X X^T / n).
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[1]
    lam = float(np.linalg.eigvalsh(x @ x.T / n).max())
    return 4.0 / lam


def descend_trajectory(
    task: SyntheticTask, steps: int, lr: float, data: Optional[SampledDataset] = None
) -> Iterator[tuple]:
    """Full-batch softmax descent from W = 0, yielding (t, W, train_loss).

    Yields steps 0..steps inclusive; W is the head before any update at
    that step, so consecutive yields differ by exactly one descent step.
    """
    if steps < 1:
        raise ValueError(f"need steps >= 1, got {steps}")
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    ds = data if data is not None else sample_dataset(task)
    x, y = ds.x_train, ds.y_train
    n = x.shape[1]
    w = np.zeros((task.n_classes, task.feature_dim))
    for t in range(steps + 1):
        with np.errstate(over="ignore"):  # overflow is caught just below
            logits = w @ x
        if not np.isfinite(logits).all():
            raise TrainingDivergedError(f"logits became non-finite at step {t}")
        pm = softmax_columns(logits)
        train_loss = cross_entropy(pm, y)
        if not math.isfinite(train_loss):
            raise TrainingDivergedError(f"training loss became non-finite at step {t}")
        yield t, w.copy(), train_loss
        if t == steps:
            break
        delta = pm.probs.copy()
        delta[y, np.arange(n)] -= 1.0
        w = w - lr * (delta @ x.T) / n


def holdout_accuracy(w: np.ndarray, x_hold: np.ndarray, y_hold: np.ndarray) -> float:
    """Exact fraction of held-out points whose top logit is the true class."""
    predicted = np.argmax(w @ x_hold, axis=0)
    return float(np.mean(predicted == y_hold))


def train_linear_head(
    task: SyntheticTask,
    steps: int,
    lr: float,
    probe_every: int,
    out_dir,
    run_id: Optional[str] = None,
) -> RunManifest:
    """Train the head and write one probe trace per probed checkpoint.

    Every step t with t % probe_every == 0 (including 0 and, when it
    divides, the final step) writes a classification trace holding the
    fixed probe batch, the current head, the exact held-out accuracy as
    the metric, and the held-out loss as aux_loss.
    """
    if probe_every < 1:
        raise ValueError(f"probe_every must be >= 1, got {probe_every}")
    os.makedirs(out_dir, exist_ok=True)
    rid = run_id or f"clf-c{task.n_classes}d{task.feature_dim}-seed{task.seed}"
    ds = sample_dataset(task)
    z_probe = ds.x_train[:, ds.probe_index]
    y_probe = ds.y_train[ds.probe_index]
    entries = []
    f32_max = float(np.finfo(np.float32).max)
    for t, w, _train_loss in descend_trajectory(task, steps, lr, data=ds):
        if t % probe_every != 0:
            continue
        if np.abs(w).max() > f32_max:
            raise TrainingDivergedError(
                f"head exceeded the trace storage range at step {t}"
            )
        pm_hold = softmax_columns(w @ ds.x_hold)
        trace = ProbeTraceFile(
            batch=ProbeBatch.classification(
                features=z_probe, head_weights=w, labels=y_probe
            ),
            step=t,
            metric=holdout_accuracy(w, ds.x_hold, ds.y_hold),
            aux_loss=cross_entropy(pm_hold, ds.y_hold),
            run_id=rid,
        )
        name = f"step-{t:06d}.bin"
        write_trace(trace, os.path.join(out_dir, name))
        entries.append(ManifestEntry(step=t, files=[name]))
    manifest = RunManifest(
        run_id=rid,
        task=CLASSIFICATION,
        n_classes=task.n_classes,
        feature_dim=task.feature_dim,
        batch_size=task.probe_batch,
        entries=entries,
        higher_is_better=True,
        notes=(
            f"gaussian-cluster run: train={task.train_size} holdout={task.holdout_size} "
            f"spread={task.spread} center_scale={task.center_scale} "
            f"label_noise={task.label_noise} lr={lr} steps={steps} seed={task.seed}"
        ),
    )
    write_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest


@dataclass
class RegressionTask:
    """Linear-teacher regression task with per-trace target noise."""

    n_outputs: int = 3
    feature_dim: int = 12
    train_size: int = 192
    holdout_size: int = 384
    probe_batch: int = 48
    target_noise: float = 0.1
    probe_noise_range: tuple = (0.05, 0.2)
    repeats: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_outputs < 1:
            raise ValueError(f"need n_outputs >= 1, got {self.n_outputs}")
        if min(self.train_size, self.holdout_size) < 2:
            raise ValueError("train and holdout sizes must be >= 2")
        if not 1 <= self.probe_batch <= self.train_size:
            raise ValueError("probe_batch must be in [1, train_size]")
        lo, hi = self.probe_noise_range
        if not 0.0 <= lo <= hi:
            raise ValueError(f"probe_noise_range must satisfy 0 <= lo <= hi, got {self.probe_noise_range}")
        if self.target_noise < 0:
            raise ValueError(f"target_noise must be >= 0, got {self.target_noise}")
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1, got {self.repeats}")


@dataclass
class SampledRegression:
    x_train: np.ndarray
    y_train: np.ndarray  # (C, n_train), teacher output + target noise
    x_hold: np.ndarray
    y_hold: np.ndarray  # clean teacher output
    w_true: np.ndarray
    probe_index: np.ndarray


def sample_regression(task: RegressionTask) -> SampledRegression:
    rng = np.random.default_rng(task.seed)
    c, d = task.n_outputs, task.feature_dim
    w_true = rng.normal(0.0, 1.0, (c, d)) / math.sqrt(d)
    x_train = rng.normal(0.0, 1.0, (d, task.train_size))
    y_train = w_true @ x_train
    if task.target_noise > 0:
        y_train = y_train + rng.normal(0.0, task.target_noise, y_train.shape)
    x_hold = rng.normal(0.0, 1.0, (d, task.holdout_size))
    y_hold = w_true @ x_hold
    probe_index = rng.choice(task.train_size, size=task.probe_batch, replace=False)
    return SampledRegression(x_train, y_train, x_hold, y_hold, w_true, probe_index)


def regression_stability_bound(features: np.ndarray) -> float:
    """Safe step size for mean half-squared loss: lr < 2 / lam_max(X X^T / n)."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[1]
    lam = float(np.linalg.eigvalsh(x @ x.T / n).max())
    return 2.0 / lam


def make_regression_run(
    task: RegressionTask,
    steps: int,
    lr: float,
    probe_every: int,
    out_dir,
    run_id: Optional[str] = None,
) -> RunManifest:
    """Regression analogue of train_linear_head with repeated probe draws.

    Each probed step emits `task.repeats` traces; every trace redraws its
    probe targets as teacher output plus fresh noise at a scale sampled
    uniformly from probe_noise_range, so downstream consumers must
    median-aggregate the per-trace scores.  metric = negative held-out
    mean squared error (higher is better); aux_loss = held-out loss in
    the probe's half-squared convention.
    """
    if probe_every < 1:
        raise ValueError(f"probe_every must be >= 1, got {probe_every}")
    if steps < 1:
        raise ValueError(f"need steps >= 1, got {steps}")
    os.makedirs(out_dir, exist_ok=True)
    rid = run_id or f"reg-c{task.n_outputs}d{task.feature_dim}-seed{task.seed}"
    ds = sample_regression(task)
    rng = np.random.default_rng(task.seed + 1)  # probe-noise stream, separate from data
    x, y = ds.x_train, ds.y_train
    n = x.shape[1]
    z_probe = x[:, ds.probe_index]
    y_probe_clean = ds.w_true @ z_probe
    lo, hi = task.probe_noise_range
    w = np.zeros((task.n_outputs, task.feature_dim))
    f32_max = float(np.finfo(np.float32).max)
    entries = []
    for t in range(steps + 1):
        with np.errstate(over="ignore"):  # overflow is caught just below
            resid_train = w @ x - y
            train_loss = 0.5 * float(np.mean((resid_train**2).sum(axis=0)))
        if not math.isfinite(train_loss):
            raise TrainingDivergedError(f"training loss became non-finite at step {t}")
        if t % probe_every == 0:
            if np.abs(w).max() > f32_max:
                raise TrainingDivergedError(
                    f"head exceeded the trace storage range at step {t}"
                )
            resid_hold = w @ ds.x_hold - ds.y_hold
            metric = -float(np.mean(resid_hold**2))
            aux = 0.5 * float(np.mean((resid_hold**2).sum(axis=0)))
            files = []
            for k in range(task.repeats):
                sigma = rng.uniform(lo, hi)
                targets = y_probe_clean + rng.normal(0.0, 1.0, y_probe_clean.shape) * sigma
                trace = ProbeTraceFile(
                    batch=ProbeBatch.regression(
                        features=z_probe, head_weights=w, targets=targets
                    ),
                    step=t,
                    metric=metric,
                    aux_loss=aux,
                    run_id=rid,
                )
                name = f"step-{t:06d}-r{k}.bin"
                write_trace(trace, os.path.join(out_dir, name))
                files.append(name)
            entries.append(ManifestEntry(step=t, files=files))
        if t == steps:
            break
        w = w - lr * (resid_train @ x.T) / n
    manifest = RunManifest(
        run_id=rid,
        task=REGRESSION,
        n_classes=task.n_outputs,
        feature_dim=task.feature_dim,
        batch_size=task.probe_batch,
        entries=entries,
        higher_is_better=True,
        notes=(
            f"linear-teacher regression run: train={task.train_size} "
            f"holdout={task.holdout_size} target_noise={task.target_noise} "
            f"probe_noise_range={lo},{hi} repeats={task.repeats} lr={lr} "
            f"steps={steps} seed={task.seed}"
        ),
    )
    write_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest
