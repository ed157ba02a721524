"""Metric-learning losses over embedding tensors.

All losses are differentiable scalars built on the autodiff tape, averaged
over the batch. Distances are guarded euclidean (see ``row_distances``), so
gradients stay finite even for coincident points.

Pair labels follow the convention y=0 for a same-class pair and y=1 for a
different-class pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

DEFAULT_MARGIN = 0.5
RTL_EPSILON = 1e-8
DEFAULT_MIX = 0.01


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters: hinge margin, hybrid mixing weight, and the
    epsilon guarding the reciprocal term."""

    margin_alpha: float = DEFAULT_MARGIN
    lambda_mix: float = DEFAULT_MIX
    rtl_epsilon: float = RTL_EPSILON

    def __post_init__(self):
        if self.margin_alpha < 0:
            raise ValueError("margin_alpha must be non-negative")
        if self.lambda_mix < 0:
            raise ValueError("lambda_mix must be non-negative")
        if self.rtl_epsilon <= 0:
            raise ValueError("rtl_epsilon must be positive")


def _as_matrix(t: Tensor) -> Tensor:
    """Promote a single embedding vector to a one-row batch on the tape."""
    if t.data.ndim == 1:
        return ad.reshape(t, (1, t.shape[0]))
    if t.data.ndim == 2:
        return t
    raise ShapeError(f"expected a vector or a (B, D) matrix, got shape {t.shape}")


def row_distances(a: Tensor, b: Tensor) -> Tensor:
    """Per-row euclidean distance between two (B, D) embedding matrices.

    Uses the guarded sqrt, so the distance between identical rows is 1e-6
    with zero gradient rather than 0 with an infinite one.
    """
    if a.shape != b.shape:
        raise ShapeError(f"row_distances: shapes {a.shape} and {b.shape} differ")
    if a.data.ndim != 2:
        raise ShapeError(f"row_distances: expected (B, D) matrices, got {a.shape}")
    diff = ad.sub(a, b)
    return ad.sqrt(ad.reduce_sum(ad.square(diff), axis=1))


def euclidean_distance(x1: Tensor, x2: Tensor) -> Tensor:
    """Guarded euclidean distance between two embedding vectors (scalar)."""
    if x1.shape != x2.shape:
        raise ShapeError(f"euclidean_distance: shapes {x1.shape} and {x2.shape} differ")
    return ad.reduce_sum(row_distances(_as_matrix(x1), _as_matrix(x2)))


def contrastive_loss(first: Tensor, second: Tensor, pair_labels,
                     margin: float = DEFAULT_MARGIN) -> Tensor:
    """Mean contrastive loss over embedding pairs.

    Same-class pairs (y=0) are pulled together with a 0.5*d penalty;
    different-class pairs (y=1) are pushed apart until the margin with
    0.5*max(0, margin - d). Accepts single vectors with a scalar label.
    """
    first, second = _as_matrix(first), _as_matrix(second)
    y = np.atleast_1d(np.asarray(pair_labels, dtype=np.float64))
    if y.shape != (first.shape[0],):
        raise ShapeError("contrastive_loss: need one pair label per row")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("pair labels must be 0 (same class) or 1 (different)")
    d = row_distances(first, second)
    # per-pair: (1-y)*0.5*d + y*0.5*max(0, margin - d)
    same_term = ad.mul(ad.mul(d, Tensor(1.0 - y)), 0.5)
    diff_term = ad.mul(ad.mul(ad.relu(ad.sub(Tensor(np.full_like(y, margin)), d)),
                              Tensor(y)), 0.5)
    return ad.mean(ad.add(same_term, diff_term))


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor,
                 margin: float = DEFAULT_MARGIN) -> Tensor:
    """Mean hinge triplet loss: max(0, d(a,p) - d(a,n) + margin)."""
    anchor, positive, negative = map(_as_matrix, (anchor, positive, negative))
    d_ap = row_distances(anchor, positive)
    d_an = row_distances(anchor, negative)
    return ad.mean(ad.relu(ad.add(ad.sub(d_ap, d_an), margin)))


def reciprocal_triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor,
                            epsilon: float = RTL_EPSILON) -> Tensor:
    """Mean margin-free triplet loss: d(a,p) + 1/(d(a,n) + epsilon)."""
    anchor, positive, negative = map(_as_matrix, (anchor, positive, negative))
    d_ap = row_distances(anchor, positive)
    d_an = row_distances(anchor, negative)
    inv = ad.pow_const(ad.add(d_an, epsilon), -1.0)
    return ad.mean(ad.add(d_ap, inv))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under row softmax.

    Accepts a single logit vector with a scalar label as well.
    """
    logits = _as_matrix(logits)
    idx = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (B, C), got {logits.shape}")
    if idx.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy: need one label per row")
    if idx.size and (idx.min() < 0 or idx.max() >= logits.shape[1]):
        raise ValueError("label outside logit column range")
    lse = ad.log_sum_exp(logits, axis=1)
    picked = ad.take_per_row(logits, idx)
    return ad.mean(ad.sub(lse, picked))


def hybrid_loss(logits: Tensor, labels, anchor: Tensor, positive: Tensor,
                negative: Tensor, mix: float = DEFAULT_MIX,
                epsilon: float = RTL_EPSILON) -> Tensor:
    """Softmax cross-entropy plus ``mix`` times the reciprocal triplet loss.

    With mix=0 this returns the cross-entropy tensor itself; the metric
    branch never touches the tape, so training histories match the pure
    softmax loss bit for bit.
    """
    ce = softmax_cross_entropy(logits, labels)
    if mix == 0.0:
        return ce
    rtl = reciprocal_triplet_loss(anchor, positive, negative, epsilon=epsilon)
    return ad.add(ce, ad.mul(rtl, mix))
