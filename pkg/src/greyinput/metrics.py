"""Threshold-free ranking metrics and the fractional confusion matrix."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .descriptors import CODES
from .errors import DataError, DimensionError


@dataclass(frozen=True)
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray


def _as_pair(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DimensionError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    if not np.all(np.isin(labels, (0, 1))):
        raise DataError("labels must be 0 or 1")
    return scores, labels.astype(np.float64)


def pr_curve(scores, labels) -> PRCurve:
    """Precision and recall at every distinct score threshold, high to low.

    Samples with tied scores enter the positive set together.
    """
    scores, labels = _as_pair(scores, labels)
    n_pos = labels.sum()
    if n_pos == 0:
        raise DataError("precision-recall is undefined without positive labels")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return PRCurve(recall=tp / n_pos, precision=tp / (tp + fp), thresholds=s[last])


def prauc(scores, labels) -> float:
    """Average precision: sum over thresholds of (R_i - R_{i-1}) * P_i."""
    curve = pr_curve(scores, labels)
    recall_steps = np.diff(np.r_[0.0, curve.recall])
    return float(np.sum(recall_steps * curve.precision))


@dataclass
class MacroPRAUC:
    macro: float
    per_class: np.ndarray  # NaN for excluded classes
    excluded: list = field(default_factory=list)


def macro_prauc(scores, labels, codes=None) -> MacroPRAUC:
    """Per-class PRAUC over the dataset and their unweighted mean.

    Classes with no positive label are excluded from the mean and listed
    in ``excluded``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    if scores.shape != labels.shape or scores.ndim != 2:
        raise DimensionError(f"scores {scores.shape} and labels {labels.shape} must be equal N x C")
    n_classes = scores.shape[1]
    if codes is None:
        codes = CODES if n_classes == len(CODES) else [str(i) for i in range(n_classes)]
    per_class = np.full(n_classes, np.nan)
    excluded = []
    for c in range(n_classes):
        if labels[:, c].sum() == 0:
            excluded.append(codes[c])
            continue
        per_class[c] = prauc(scores[:, c], labels[:, c])
    if np.all(np.isnan(per_class)):
        raise DataError("no class has a positive label; macro PRAUC is undefined")
    return MacroPRAUC(float(np.nanmean(per_class)), per_class, excluded)


# ---------------------------------------------------------------------------
# confusion matrix


def confusion_update(m: np.ndarray, labels, scores) -> bool:
    """Add one image's contribution to ``m`` (rows true, columns confused).

    A true descriptor that no absent descriptor strictly outscores adds 1
    on the diagonal.  An absent descriptor ``f`` whose score strictly exceeds the
    scores of k true descriptors adds 1/k to each of those k rows in
    column ``f``.  Returns False (and leaves ``m`` alone) when the image
    has no true label.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or m.shape != (labels.size, labels.size):
        raise DimensionError(f"labels {labels.shape}, scores {scores.shape}, matrix {m.shape} disagree")
    true_idx = np.flatnonzero(labels == 1)
    false_idx = np.flatnonzero(labels == 0)
    if true_idx.size == 0:
        return False
    top_false = scores[false_idx].max() if false_idx.size else -np.inf
    for t in true_idx:
        if scores[t] >= top_false:
            m[t, t] += 1.0
    for f in false_idx:
        exceeded = true_idx[scores[f] > scores[true_idx]]
        if exceeded.size:
            m[exceeded, f] += 1.0 / exceeded.size
    return True


class ConfusionMatrix:
    def __init__(self, n_classes: int = len(CODES), codes=None):
        self.m = np.zeros((n_classes, n_classes))
        self.codes = list(codes) if codes is not None else list(CODES[:n_classes])
        self.skipped: list[int] = []
        self._seen = 0

    def update(self, labels, scores) -> None:
        if not confusion_update(self.m, labels, scores):
            self.skipped.append(self._seen)
        self._seen += 1

    def update_batch(self, labels, scores) -> None:
        for y, s in zip(np.asarray(labels), np.asarray(scores)):
            self.update(y, s)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.m.shape[0], self.codes)
        out.m = self.m + other.m
        return out

    def to_csv(self, path) -> None:
        write_matrix_csv(path, self.m, self.codes)


def write_matrix_csv(path, m: np.ndarray, codes) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\predicted", *codes])
        for code, row in zip(codes, m):
            w.writerow([code, *(repr(float(v)) for v in row)])


def write_per_class_csv(path, per_class, codes=CODES) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["descriptor", "prauc"])
        for code, v in zip(codes, per_class):
            w.writerow([code, "" if np.isnan(v) else repr(float(v))])
