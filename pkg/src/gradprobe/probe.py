"""Numerical readouts computed from one exported checkpoint batch.

Everything here is a pure function of its inputs: no caches, no globals,
safe to call concurrently on different checkpoints.  Tensors may arrive in
float32 from disk; all arithmetic runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

CLASSIFICATION = "classification"
REGRESSION = "regression"

DEFAULT_EPS = 1e-12

# Denominators below this without an epsilon are refused rather than divided.
_DIV_GUARD = 1e-12


class ProbeInputError(ValueError):
    """A batch, matrix, or parameter failed validation."""


@dataclass
class ProbeBatch:
    """One checkpoint's exported tensors.

    features       : (d, B) detached feature columns, one per example
    head_weights   : (C, d) final linear map
    labels         : (B,) integer class ids, classification mode
    targets        : (C, B) real targets, regression mode
    """

    features: np.ndarray
    head_weights: np.ndarray
    mode: str = CLASSIFICATION
    labels: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.head_weights = np.asarray(self.head_weights, dtype=np.float64)
        if self.features.ndim != 2 or min(self.features.shape) < 1:
            raise ProbeInputError(
                f"features must be a (d, B) matrix with d, B >= 1, got shape {self.features.shape}"
            )
        if self.head_weights.ndim != 2 or min(self.head_weights.shape) < 1:
            raise ProbeInputError(
                f"head_weights must be a (C, d) matrix, got shape {self.head_weights.shape}"
            )
        d, b = self.features.shape
        c, dw = self.head_weights.shape
        if dw != d:
            raise ProbeInputError(
                f"head expects feature dim {dw} but features have dim {d} (W {self.head_weights.shape} vs Z {self.features.shape})"
            )
        if not np.isfinite(self.features).all():
            raise ProbeInputError("features contain non-finite entries")
        if not np.isfinite(self.head_weights).all():
            raise ProbeInputError("head_weights contain non-finite entries")

        if self.mode == CLASSIFICATION:
            if c < 2:
                raise ProbeInputError(f"classification needs C >= 2 output rows, got C={c}")
            if self.labels is None:
                raise ProbeInputError("classification batch needs labels")
            self.labels = np.asarray(self.labels)
            if self.labels.ndim != 1 or self.labels.shape[0] != b:
                raise ProbeInputError(
                    f"labels must have shape ({b},), got {self.labels.shape}"
                )
            if not np.issubdtype(self.labels.dtype, np.integer):
                as_int = self.labels.astype(np.int64)
                if not np.array_equal(as_int, self.labels):
                    raise ProbeInputError("labels must be integers")
                self.labels = as_int
            bad = np.where((self.labels < 0) | (self.labels >= c))[0]
            if bad.size:
                i = int(bad[0])
                raise ProbeInputError(
                    f"label out of range at index {i}: {int(self.labels[i])} not in [0, {c})"
                )
        elif self.mode == REGRESSION:
            if self.targets is None:
                raise ProbeInputError("regression batch needs targets")
            self.targets = np.asarray(self.targets, dtype=np.float64)
            if self.targets.shape != (c, b):
                raise ProbeInputError(
                    f"targets must have shape ({c}, {b}), got {self.targets.shape}"
                )
            if not np.isfinite(self.targets).all():
                raise ProbeInputError("targets contain non-finite entries")
        else:
            raise ProbeInputError(f"unknown mode {self.mode!r}")

    @classmethod
    def classification(cls, features, head_weights, labels) -> "ProbeBatch":
        return cls(features, head_weights, CLASSIFICATION, labels=labels)

    @classmethod
    def regression(cls, features, head_weights, targets) -> "ProbeBatch":
        return cls(features, head_weights, REGRESSION, targets=targets)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[0]

    @property
    def batch_size(self) -> int:
        return self.features.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.head_weights.shape[0]


@dataclass
class ProbMatrix:
    """Column-stochastic probabilities with the matching log-probabilities.

    Keeping log_probs alongside lets downstream losses avoid log(p) on
    saturated columns; both come out of one stabilized softmax pass.
    """

    probs: np.ndarray
    log_probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.log_probs = np.asarray(self.log_probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.shape != self.log_probs.shape:
            raise ProbeInputError("probs and log_probs must be matching 2-D matrices")
        if (self.probs < 0).any() or (self.probs > 1).any():
            raise ProbeInputError("probabilities must lie in [0, 1]")
        sums = self.probs.sum(axis=0)
        off = np.abs(sums - 1.0)
        if off.max(initial=0.0) > 1e-9:
            j = int(np.argmax(off))
            raise ProbeInputError(
                f"column {j} sums to {sums[j]:.12g}, not 1 within 1e-9"
            )

    @property
    def n_classes(self) -> int:
        return self.probs.shape[0]

    @property
    def n_columns(self) -> int:
        return self.probs.shape[1]


@dataclass
class ProbeScore:
    """All readouts computed at one checkpoint.

    Output-distribution readouts (fisher_trace, confidence, entropy, margin)
    are None in regression mode, where no class distribution exists.
    """

    grad_fro: float
    grad_l1: float
    grad_linf: float
    score_z: float
    score_w: float
    loss: float
    eps_z: float
    eps_w: float
    fisher_trace: Optional[float] = None
    confidence: Optional[float] = None
    entropy: Optional[float] = None
    margin: Optional[float] = None

    def as_dict(self) -> dict:
        return {
            "grad_fro": self.grad_fro,
            "grad_l1": self.grad_l1,
            "grad_linf": self.grad_linf,
            "fisher_trace": self.fisher_trace,
            "score_z": self.score_z,
            "score_w": self.score_w,
            "loss": self.loss,
            "confidence": self.confidence,
            "entropy": self.entropy,
            "margin": self.margin,
            "eps_z": self.eps_z,
            "eps_w": self.eps_w,
        }


def softmax_columns(logits: np.ndarray) -> ProbMatrix:
    """Column-wise softmax with per-column max subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ProbeInputError(f"logits must be 2-D, got shape {logits.shape}")
    finite = np.isfinite(logits).all(axis=0)
    if not finite.all():
        bad = np.where(~finite)[0]
        raise ProbeInputError(
            f"non-finite logits in column {int(bad[0])}"
            + (f" (and {bad.size - 1} more)" if bad.size > 1 else "")
        )
    shifted = logits - logits.max(axis=0, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    log_probs = shifted - lse
    return ProbMatrix(probs=np.exp(log_probs), log_probs=log_probs)


def cross_entropy(pm: ProbMatrix, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of the labels under pm.

    Uses the log-probabilities carried by pm (log-sum-exp path), never the
    log of a stored probability, so saturated columns stay exact.
    """
    labels = np.asarray(labels)
    c, b = pm.probs.shape
    if labels.ndim != 1 or labels.shape[0] != b:
        raise ProbeInputError(f"labels must have shape ({b},), got {labels.shape}")
    bad = np.where((labels < 0) | (labels >= c))[0]
    if bad.size:
        i = int(bad[0])
        raise ProbeInputError(f"label out of range at index {i}: {int(labels[i])} not in [0, {c})")
    return float(-np.mean(pm.log_probs[labels, np.arange(b)]))


def head_gradient(batch: ProbeBatch) -> np.ndarray:
    """Exact analytic gradient of the mean-reduced loss w.r.t. the head only.

    Classification: mean cross-entropy, gradient (P - onehot(y)) Z^T / B.
    Regression: mean of 0.5 * ||W z - y||^2, gradient (W Z - Y) Z^T / B.
    """
    z = batch.features
    b = batch.batch_size
    if batch.mode == CLASSIFICATION:
        pm = softmax_columns(batch.head_weights @ z)
        delta = pm.probs.copy()
        # one-hot subtraction as a column update, never a dense C x B target
        delta[batch.labels, np.arange(b)] -= 1.0
    else:
        delta = batch.head_weights @ z - batch.targets
    return (delta @ z.T) / b


def gradient_norms(g: np.ndarray) -> tuple[float, float, float]:
    """Entrywise L1 sum, Frobenius norm, max absolute entry of g."""
    g = np.asarray(g, dtype=np.float64)
    if not np.isfinite(g).all():
        raise ProbeInputError("gradient contains non-finite entries")
    a = np.abs(g)
    return float(a.sum()), float(np.sqrt((g * g).sum())), float(a.max())


def fisher_trace(batch: ProbeBatch) -> float:
    """Mean squared per-example head-gradient norm at the observed labels.

    Per example the gradient is the outer product (p_i - onehot(y_i)) z_i^T,
    whose squared Frobenius norm factors into ||p_i - e_{y_i}||^2 ||z_i||^2.
    """
    if batch.mode != CLASSIFICATION:
        raise ProbeInputError("fisher_trace requires a classification batch")
    z = batch.features
    b = batch.batch_size
    pm = softmax_columns(batch.head_weights @ z)
    delta = pm.probs.copy()
    delta[batch.labels, np.arange(b)] -= 1.0
    per_example = (delta * delta).sum(axis=0) * (z * z).sum(axis=0)
    return float(per_example.mean())


def normalized_scores(
    grad_fro: float,
    features: np.ndarray,
    head_weights: np.ndarray,
    eps_z: float = DEFAULT_EPS,
    eps_w: float = DEFAULT_EPS,
) -> tuple[float, float]:
    """Gradient norm scaled by feature magnitude and by head magnitude."""
    if eps_z < 0 or eps_w < 0:
        raise ProbeInputError("eps_z and eps_w must be nonnegative")
    z_norm = float(np.linalg.norm(np.asarray(features, dtype=np.float64)))
    w_norm = float(np.linalg.norm(np.asarray(head_weights, dtype=np.float64)))
    if eps_z == 0 and z_norm < _DIV_GUARD:
        raise ProbeInputError(f"feature norm {z_norm:.3g} too small to divide with eps_z=0")
    if eps_w == 0 and w_norm < _DIV_GUARD:
        raise ProbeInputError(f"head norm {w_norm:.3g} too small to divide with eps_w=0")
    return grad_fro / (z_norm + eps_z), grad_fro / (w_norm + eps_w)


def output_readouts(pm: ProbMatrix) -> tuple[float, float, float]:
    """Batch-mean confidence, predictive entropy (nats), and top-2 margin."""
    p = pm.probs
    if p.shape[0] < 2:
        raise ProbeInputError("output readouts need at least 2 classes")
    confidence = float(p.max(axis=0).mean())
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    entropy = float(-plogp.sum(axis=0).mean())
    top2 = np.sort(p, axis=0)[-2:, :]
    margin = float((top2[1] - top2[0]).mean())
    return confidence, entropy, margin


def probe(batch: ProbeBatch, eps_z: float = DEFAULT_EPS, eps_w: float = DEFAULT_EPS) -> ProbeScore:
    """All readouts for one checkpoint batch in a single pass.

    Cost is O(C d B): one head forward, one analytic backward, plus
    elementwise reductions.  Nothing touches backbone parameters.
    """
    z = batch.features
    b = batch.batch_size
    if batch.mode == CLASSIFICATION:
        pm = softmax_columns(batch.head_weights @ z)
        delta = pm.probs.copy()
        delta[batch.labels, np.arange(b)] -= 1.0
        g = (delta @ z.T) / b
        loss = cross_entropy(pm, batch.labels)
        per_example = (delta * delta).sum(axis=0) * (z * z).sum(axis=0)
        fisher = float(per_example.mean())
        confidence, entropy, margin = output_readouts(pm)
    else:
        residual = batch.head_weights @ z - batch.targets
        g = (residual @ z.T) / b
        loss = float(0.5 * (residual * residual).sum() / b)
        fisher = confidence = entropy = margin = None
    l1, fro, linf = gradient_norms(g)
    score_z, score_w = normalized_scores(fro, z, batch.head_weights, eps_z, eps_w)
    return ProbeScore(
        grad_fro=fro,
        grad_l1=l1,
        grad_linf=linf,
        score_z=score_z,
        score_w=score_w,
        loss=loss,
        eps_z=eps_z,
        eps_w=eps_w,
        fisher_trace=fisher,
        confidence=confidence,
        entropy=entropy,
        margin=margin,
    )
