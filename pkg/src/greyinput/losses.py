"""Multi-label losses on sigmoid scores: class-weighted BCE and Soft-F1."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DataError, DimensionError, ParameterError
from .tensor import Tensor

BCE_EPS = 1e-7
SOFT_F1_EPS = 1e-10


def weights_from_counts(counts, names=None) -> np.ndarray:
    """Per-class weights proportional to 1/count, rescaled to mean one."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise DataError(f"counts must be a non-empty vector, got shape {counts.shape}")
    bad = np.flatnonzero(counts < 1)
    if bad.size:
        label = names[bad[0]] if names is not None else f"index {bad[0]}"
        raise DataError(f"class {label} has count {counts[bad[0]]:g}; every class needs >= 1 example")
    inv = counts.min() / counts
    return inv / inv.mean()


def _check(scores: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise DimensionError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    return labels


def weighted_bce(scores: Tensor, labels, weights=None, eps: float = BCE_EPS) -> Tensor:
    """Mean over samples and classes of ``-w_c [y log p + (1-y) log(1-p)]``.

    Scores are clamped to ``[eps, 1-eps]`` first.
    """
    labels = _check(scores, labels)
    if weights is None:
        weights = np.ones(scores.shape[-1])
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (scores.shape[-1],):
        raise DimensionError(f"weights {weights.shape} do not match {scores.shape[-1]} classes")
    if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
        raise ParameterError("class weights must be finite and positive")
    p = T.clip(scores, eps, 1.0 - eps)
    y = Tensor(labels)
    ll = y * T.log(p) + (1.0 - y) * T.log(1.0 - p)
    return -(ll * Tensor(weights)).mean()


def soft_f1_loss(scores: Tensor, labels, eps: float = SOFT_F1_EPS) -> Tensor:
    """``1 - mean_c F1_c`` with probabilistic TP/FP/FN summed over the batch.

    Classes that have neither a positive label nor any score mass in the
    batch are left out of the mean; if every class is left out the loss
    is zero.
    """
    labels = _check(scores, labels)
    if scores.ndim != 2:
        raise DimensionError(f"soft_f1_loss expects B x C scores, got {scores.shape}")
    y = Tensor(labels)
    tp = (scores * y).sum(axis=0)
    fp = (scores * (1.0 - y)).sum(axis=0)
    fn = (y * (1.0 - scores)).sum(axis=0)
    f1 = (2.0 * tp) / (2.0 * tp + fp + fn + eps)
    active = (labels.sum(axis=0) > 0) | (scores.data.sum(axis=0) > 0)
    n_active = int(active.sum())
    if n_active == 0:
        return scores.sum() * 0.0
    return 1.0 - (f1 * Tensor(active.astype(np.float64))).sum() * (1.0 / n_active)


LOSSES = {"bce": weighted_bce, "soft_f1": soft_f1_loss}
