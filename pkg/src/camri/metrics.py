"""Confusion matrices, recall/accuracy, and angular geometry diagnostics."""

import csv
import math
from dataclasses import dataclass

import numpy as np

from camri.errors import (
    DegenerateNormError,
    IncomparableMatricesError,
    InvalidInputError,
    UndefinedRecallError,
)
from camri.numerics import normalize_rows, safe_arccos


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    counts: np.ndarray

    @property
    def K(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def row_totals(self):
        return self.counts.sum(axis=1)


@dataclass(frozen=True)
class ClassAngle:
    mean: float
    std: float
    n: int


@dataclass(frozen=True)
class AngleStats:
    per_class: tuple
    skipped: int = 0

    def std(self):
        return np.array([c.std for c in self.per_class])

    def mean(self):
        return np.array([c.mean for c in self.per_class])


def confusion(preds, labels, K):
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise InvalidInputError(f"{preds.shape[0]} predictions for {labels.shape[0]} labels")
    if preds.size and (max(preds.max(), labels.max()) >= K or min(preds.min(), labels.min()) < 0):
        raise InvalidInputError(f"class index outside 0..{K - 1}")
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def accuracy(cm):
    if cm.total == 0:
        raise InvalidInputError("accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def recall(cm, k):
    row = cm.counts[k].sum()
    if row == 0:
        raise UndefinedRecallError(f"class {k} has no true samples; recall is undefined")
    return float(cm.counts[k, k] / row)


def recalls(cm):
    return np.array([recall(cm, k) for k in range(cm.K)])


def confusion_diff(cm_a, cm_b):
    """Entrywise ``cm_a - cm_b``; both must have identical per-class row totals."""
    a, b = np.asarray(cm_a.counts), np.asarray(cm_b.counts)
    if a.shape != b.shape:
        raise IncomparableMatricesError(f"shapes differ: {a.shape} vs {b.shape}")
    if np.any(a.sum(axis=1) != b.sum(axis=1)):
        raise IncomparableMatricesError("row totals differ; matrices come from different test sets")
    return a - b


def angle_stats(features, labels, W):
    """Per-class mean and population std of the angle to the true-class weight column.

    Zero-norm feature rows are skipped and counted in ``skipped``.
    """
    Z = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    W = np.asarray(W, dtype=np.float64)
    K = W.shape[1]
    keep = np.linalg.norm(Z, axis=1) > 0
    skipped = int((~keep).sum())
    Z, labels = Z[keep], labels[keep]
    Zn, _ = normalize_rows(Z, axis=1) if len(Z) else (Z, None)
    Wn, _ = normalize_rows(W, axis=0)
    theta = safe_arccos(np.sum(Zn * Wn[:, labels].T, axis=1)) if len(Z) else np.zeros(0)
    theta = np.atleast_1d(theta)
    per_class = []
    for k in range(K):
        th = theta[labels == k]
        if len(th):
            per_class.append(ClassAngle(float(th.mean()), float(th.std()), int(len(th))))
        else:
            per_class.append(ClassAngle(math.nan, math.nan, 0))
    return AngleStats(tuple(per_class), skipped)


def average_angle_stats(stats):
    """Average per-trial statistics (mean of means, mean of stds, summed n)."""
    K = len(stats[0].per_class)
    out = []
    for k in range(K):
        rows = [s.per_class[k] for s in stats]
        out.append(
            ClassAngle(
                float(np.mean([r.mean for r in rows])),
                float(np.mean([r.std for r in rows])),
                int(sum(r.n for r in rows)),
            )
        )
    return AngleStats(tuple(out), sum(s.skipped for s in stats))


def weight_gap(W, kappa):
    """Smallest angle between weight column ``kappa`` and any other column."""
    W = np.asarray(W, dtype=np.float64)
    if np.any(np.linalg.norm(W, axis=0) == 0):
        raise DegenerateNormError("weight matrix has a zero column")
    Wn, _ = normalize_rows(W, axis=0)
    cos = Wn[:, kappa] @ Wn
    others = np.delete(cos, kappa)
    return float(np.min(safe_arccos(others)))


def write_confusion_csv(cm, path, class_names=None):
    names = class_names or [str(k) for k in range(cm.K)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in cm.counts:
            writer.writerow([int(v) for v in row])


def read_confusion_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return ConfusionMatrix(np.array([[int(v) for v in r] for r in rows[1:]], dtype=np.int64))


def write_angle_csv(stats, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "mean_theta", "std_theta", "n"])
        for k, c in enumerate(stats.per_class):
            writer.writerow([k, repr(c.mean), repr(c.std), c.n])
