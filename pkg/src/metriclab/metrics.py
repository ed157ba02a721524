"""Evaluation quantities: confusion matrix, weighted accuracy, macro
precision/recall/F1, and the plain (unadjusted) Rand index.

Averaging rules, pinned here and relied on by the reports: accuracy is
trace/total (sample-weighted); macro averages run over the classes that
appear in the ground truth, and a class whose precision or recall has a
zero denominator contributes 0 to the mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricsError(ValueError):
    """Mismatched label arrays or empty confusion input."""


@dataclass(frozen=True)
class MetricsReport:
    confusion: np.ndarray
    accuracy_weighted: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    rand_index: float | None = None


def confusion_matrix(true_labels, predicted_labels, class_count: int) -> np.ndarray:
    """Count matrix with rows = true class, columns = predicted class."""
    t = np.asarray(true_labels, dtype=np.intp)
    p = np.asarray(predicted_labels, dtype=np.intp)
    if t.shape != p.shape or t.ndim != 1:
        raise MetricsError(f"label arrays must be equal-length vectors, "
                           f"got {t.shape} and {p.shape}")
    if t.size and (min(t.min(), p.min()) < 0
                   or max(t.max(), p.max()) >= class_count):
        raise MetricsError(f"label outside [0, {class_count})")
    counts = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return counts


def classification_metrics(confusion) -> MetricsReport:
    """Scalar metrics from a confusion matrix (see module rules)."""
    c = np.asarray(confusion, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise MetricsError(f"confusion must be square, got {c.shape}")
    total = c.sum()
    if total == 0:
        raise MetricsError("empty confusion matrix")

    tp = np.diag(c)
    col = c.sum(axis=0)
    row = c.sum(axis=1)
    present = row > 0

    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(col > 0, tp / np.where(col > 0, col, 1), 0.0)
        recall = np.where(row > 0, tp / np.where(row > 0, row, 1), 0.0)
        pr_sum = precision + recall
        f1 = np.where(pr_sum > 0, 2.0 * precision * recall
                      / np.where(pr_sum > 0, pr_sum, 1), 0.0)

    return MetricsReport(
        confusion=np.asarray(confusion),
        accuracy_weighted=float(tp.sum() / total),
        precision_macro=float(precision[present].mean()),
        recall_macro=float(recall[present].mean()),
        f1_macro=float(f1[present].mean()),
    )


def rand_index(partition_a, partition_b) -> float:
    """Fraction of point pairs on which two partitions agree.

    A pair agrees when both partitions co-cluster it or both separate it.
    Computed by pair counting on the contingency table.
    """
    a = np.asarray(partition_a)
    b = np.asarray(partition_b)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricsError("partitions must be equal-length vectors")
    n = a.size
    if n < 2:
        raise MetricsError("rand index needs at least 2 points")

    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def pairs(x):
        x = x.astype(np.float64)
        return (x * (x - 1) / 2.0).sum()

    total = n * (n - 1) / 2.0
    same_both = pairs(table)
    same_a = pairs(table.sum(axis=1))
    same_b = pairs(table.sum(axis=0))
    agreeing = total + 2.0 * same_both - same_a - same_b
    return float(agreeing / total)
