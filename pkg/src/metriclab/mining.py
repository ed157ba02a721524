"""Batch-hard triplet mining.

Mining is a pure index selection over a mini-batch: it inspects distances
but produces no gradients, so everything here is plain numpy. The trainer
re-embeds the selected rows on the tape afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import SQRT_FLOOR


def pairwise_distances(points) -> np.ndarray:
    """Dense euclidean distance matrix with guarded sqrt off the diagonal.

    Distances are computed from explicit row differences (not the expanded
    dot-product form), which keeps them exact for identical rows. The
    diagonal is exactly zero; off-diagonal zeros are floored at 1e-6 by the
    same guard the differentiable path uses.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"pairwise_distances: expected (N, D), got shape {x.shape}")
    diff = x[:, None, :] - x[None, :, :]
    ssq = np.einsum("ijk,ijk->ij", diff, diff)
    d = np.sqrt(np.maximum(ssq, SQRT_FLOOR))
    np.fill_diagonal(d, 0.0)
    return d


@dataclass(frozen=True)
class Triplets:
    """Mined (anchor, positive, negative) index triples, one per usable anchor.

    ``skipped`` counts anchors with no same-class partner; ``single_class``
    is set when the whole batch shares one label and nothing could be mined.
    """

    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    skipped: int = 0
    single_class: bool = False

    def __len__(self) -> int:
        return self.anchor.size

    @property
    def empty(self) -> bool:
        return self.anchor.size == 0


def batch_hard(labels, distances=None, points=None) -> Triplets:
    """Select the hardest positive and negative for every anchor.

    For anchor i the positive is the farthest same-label row (j != i) and
    the negative is the nearest different-label row; ties break toward the
    lowest row index. Anchors whose label appears only once in the batch
    are skipped. A single-label batch yields an empty result, which callers
    treat as "nothing to mine".

    Pass either a precomputed ``distances`` matrix or raw ``points``.
    """
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ValueError("labels must be a flat sequence")
    if (distances is None) == (points is None):
        raise ValueError("pass exactly one of distances or points")
    d = pairwise_distances(points) if distances is None else np.asarray(distances, dtype=np.float64)
    n = y.size
    if d.shape != (n, n):
        raise ValueError(f"distance matrix shape {d.shape} does not match {n} labels")

    single_class = n > 0 and (y == y[0]).all()
    anchors, positives, negatives = [], [], []
    skipped = 0
    for i in range(n):
        same = (y == y[i])
        same[i] = False
        other = y != y[i]
        if not same.any():
            skipped += 1
            continue
        if not other.any():
            continue
        row = d[i]
        # argmax / argmin over masked rows; np.argmax picks the first (lowest
        # index) among ties, matching the tie rule
        pos_candidates = np.where(same, row, -np.inf)
        neg_candidates = np.where(other, row, np.inf)
        anchors.append(i)
        positives.append(int(np.argmax(pos_candidates)))
        negatives.append(int(np.argmin(neg_candidates)))
    return Triplets(anchor=np.asarray(anchors, dtype=np.intp),
                    positive=np.asarray(positives, dtype=np.intp),
                    negative=np.asarray(negatives, dtype=np.intp),
                    skipped=skipped, single_class=bool(single_class))


def all_valid_triplets(labels) -> list[tuple[int, int, int]]:
    """Every (anchor, positive, negative) index triple with matching anchor
    and positive labels, a distinct positive, and a mismatching negative.
    Lexicographic order. Exhaustive, for use as a mining oracle."""
    y = np.asarray(labels)
    out = []
    n = y.size
    for a in range(n):
        for p in range(n):
            if p == a or y[p] != y[a]:
                continue
            for neg in range(n):
                if y[neg] != y[a]:
                    out.append((a, p, neg))
    return out
