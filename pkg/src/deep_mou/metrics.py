"""Clustering agreement measures and parameter-recovery distances.

Sampler label indices are arbitrary, so accuracy and recovery distances
are computed after an optimal (Hungarian) matching; the adjusted Rand
index is relabeling-invariant by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "Partition",
    "adjusted_rand_index",
    "matched_accuracy",
    "recovery_distance",
    "contingency_table",
]


@dataclass(frozen=True)
class Partition:
    """Hard assignment of items to cluster labels in ``[0, k)``."""

    labels: np.ndarray
    k: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.size == 0:
            raise ValueError("labels must be a nonempty 1-D array")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if labels.min() < 0 or labels.max() >= self.k:
            raise ValueError("labels must lie in [0, k)")
        object.__setattr__(self, "labels", labels)
        labels.setflags(write=False)

    @classmethod
    def from_labels(cls, labels, k: int | None = None) -> "Partition":
        labels = np.asarray(labels, dtype=np.int64)
        if k is None:
            k = int(labels.max()) + 1 if labels.size else 1
        return cls(labels, k)

    def __len__(self) -> int:
        return int(self.labels.size)


def _as_labels(p) -> np.ndarray:
    if isinstance(p, Partition):
        return p.labels
    return np.asarray(p, dtype=np.int64)


def contingency_table(a, b) -> np.ndarray:
    """Cross-tabulation of two equal-length label vectors."""
    la, lb = _as_labels(a), _as_labels(b)
    if la.size != lb.size:
        raise ValueError(f"partition lengths differ: {la.size} vs {lb.size}")
    ka = int(la.max()) + 1 if la.size else 1
    kb = int(lb.max()) + 1 if lb.size else 1
    table = np.zeros((ka, kb), dtype=np.int64)
    np.add.at(table, (la, lb), 1)
    return table


def adjusted_rand_index(a, b) -> float:
    """Hubert-Arabie adjusted Rand index of two partitions.

    Computed with exact integer arithmetic from the contingency table,
    so textbook cases come out exactly.  Degenerate pairs (both trivial,
    zero denominator) score 1.0; they can only arise when the two
    partitions are the same partition.
    """
    table = contingency_table(a, b)
    n = int(table.sum())
    if n < 2:
        return 1.0
    index = sum(math.comb(int(v), 2) for v in table.ravel())
    sum_a = sum(math.comb(int(v), 2) for v in table.sum(axis=1))
    sum_b = sum(math.comb(int(v), 2) for v in table.sum(axis=0))
    total = math.comb(n, 2)
    expected = Fraction(sum_a * sum_b, total)
    maximum = Fraction(sum_a + sum_b, 2)
    if maximum == expected:
        return 1.0
    return float(Fraction(index - expected, 1) / (maximum - expected))


def matched_accuracy(pred, truth) -> float:
    """Correct fraction after optimally matching predicted labels to truth.

    The Hungarian assignment on the confusion matrix maximizes the
    matched trace, handling differing label counts by injection.
    """
    table = contingency_table(pred, truth)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum()) / float(table.sum())


def recovery_distance(true_mat, est_mat) -> np.ndarray:
    """Per-row Euclidean distances, normalized by T, after row matching.

    Rows of ``est_mat`` are matched to rows of ``true_mat`` by the
    permutation minimizing total Euclidean distance; distances are
    reported in true-row order.
    """
    true_arr = np.asarray(true_mat, dtype=np.float64)
    est_arr = np.asarray(est_mat, dtype=np.float64)
    if true_arr.shape != est_arr.shape or true_arr.ndim != 2:
        raise ValueError(f"shape mismatch: {true_arr.shape} vs {est_arr.shape}")
    diff = true_arr[:, None, :] - est_arr[None, :, :]
    pair = np.sqrt(np.sum(diff * diff, axis=2))
    rows, cols = linear_sum_assignment(pair)
    out = np.empty(true_arr.shape[0], dtype=np.float64)
    out[rows] = pair[rows, cols]
    return out / true_arr.shape[1]
