"""Exact t-SNE: project an N x D point set to 2D for inspection.

O(N^2) affinities, no tree approximations. Per-point Gaussian bandwidths
come from a bisection on the target perplexity; the 2D layout is fit by
gradient descent with momentum and an early exaggeration phase. Geared to
desk-scale N (a few thousand points), where exactness beats speed.

RNG stream tag (combined with the config seed): TAG_TSNE = 61.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TAG_TSNE = 61

EXAGGERATION_STEPS = 250
MOMENTUM_SWITCH = 250
EARLY_MOMENTUM = 0.5
LATE_MOMENTUM = 0.8
PERPLEXITY_TOLERANCE = 1e-4
MAX_BISECTIONS = 100
INIT_SIGMA = 1e-4
LOG_FLOOR = 1e-12


class ProjectionError(ValueError):
    """Infeasible perplexity or malformed input."""


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    early_exaggeration: float = 12.0
    seed: int = 0

    def __post_init__(self):
        if not self.perplexity > 1.0:
            raise ProjectionError(f"perplexity must exceed 1, got {self.perplexity}")
        if self.iterations < 250:
            raise ProjectionError(f"need at least 250 iterations, got {self.iterations}")
        if self.learning_rate <= 0:
            raise ProjectionError("learning_rate must be positive")
        if self.early_exaggeration < 1.0:
            raise ProjectionError("early_exaggeration must be at least 1")


def _row_distribution(squared_row: np.ndarray, beta: float):
    """Gaussian affinities at precision beta, with the entropy in bits."""
    logits = -beta * squared_row
    logits -= logits.max()
    weights = np.exp(logits)
    probs = weights / weights.sum()
    entropy = -np.sum(probs * np.log2(np.maximum(probs, 1e-300)))
    return probs, entropy


def perplexity_calibration(distances_row, target_perplexity: float):
    """Bisect the Gaussian precision so 2^entropy hits the target.

    `distances_row` holds squared distances from one point to the others
    (self excluded). Returns (beta, converged); when the target is
    unreachable within MAX_BISECTIONS the last bound is returned with
    converged=False.
    """
    row = np.asarray(distances_row, dtype=np.float64).ravel()
    if row.size < 2 or not np.all(np.isfinite(row)):
        raise ProjectionError("need at least 2 finite distances to calibrate")

    beta = 1.0
    lo, hi = 0.0, np.inf
    for _ in range(MAX_BISECTIONS):
        _, entropy = _row_distribution(row, beta)
        gap = 2.0 ** entropy - target_perplexity
        if abs(gap) < PERPLEXITY_TOLERANCE:
            return beta, True
        if gap > 0:  # too diffuse: sharpen
            lo = beta
            beta = beta * 2.0 if np.isinf(hi) else 0.5 * (beta + hi)
        else:
            hi = beta
            beta = beta / 2.0 if lo == 0.0 else 0.5 * (beta + lo)
    return beta, False


def _squared_distances(points: np.ndarray) -> np.ndarray:
    ssq = np.einsum("nd,nd->n", points, points)
    sq = ssq[:, None] + ssq[None, :] - 2.0 * points @ points.T
    np.maximum(sq, 0.0, out=sq)
    np.fill_diagonal(sq, 0.0)
    return sq


def joint_affinities(points, perplexity: float) -> np.ndarray:
    """Symmetrized t-SNE affinity matrix P (non-negative, sums to 1)."""
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    sq = _squared_distances(x)
    others = ~np.eye(n, dtype=bool)

    conditional = np.zeros((n, n))
    for i in range(n):
        row = sq[i][others[i]]
        beta, _ = perplexity_calibration(row, perplexity)
        probs, _ = _row_distribution(row, beta)
        conditional[i][others[i]] = probs

    return (conditional + conditional.T) / (2.0 * n)


def tsne_project(points, cfg: TsneConfig):
    """Project points to 2D. Returns (coords: N x 2, kl_trace: iterations).

    trace[i] is the KL divergence between the plain affinities and the
    layout at the end of iteration i. During the exaggeration phase the
    descent follows the boosted objective, so the plain trace may move
    either way there; once exaggeration ends, a restart rule (zero the
    velocity and fall back to a shrinking plain gradient step whenever a
    momentum step would raise KL) keeps the trace non-increasing.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 5:
        raise ProjectionError(f"need an N x D array with N >= 5, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ProjectionError("non-finite values in input")
    n = x.shape[0]
    if not cfg.perplexity < n / 3.0:
        raise ProjectionError(
            f"perplexity {cfg.perplexity} infeasible for {n} points (need < N/3)")

    p = joint_affinities(x, cfg.perplexity)
    p_positive = p > 0
    p_log_p = np.sum(p[p_positive] * np.log(p[p_positive]))

    def evaluate(coords):
        sq = _squared_distances(coords)
        kernel = 1.0 / (1.0 + sq)
        np.fill_diagonal(kernel, 0.0)
        q = kernel / kernel.sum()
        kl = p_log_p - np.sum(
            p[p_positive] * np.log(np.maximum(q[p_positive], LOG_FLOOR)))
        return q, kernel, kl

    rng = np.random.default_rng([cfg.seed, TAG_TSNE])
    coords = rng.normal(0.0, INIT_SIGMA, size=(n, 2))
    velocity = np.zeros_like(coords)
    q, kernel, kl = evaluate(coords)
    trace = np.empty(cfg.iterations)

    for step in range(cfg.iterations):
        boost = cfg.early_exaggeration if step < EXAGGERATION_STEPS else 1.0
        attraction = (boost * p - q) * kernel
        grad = 4.0 * (np.diag(attraction.sum(axis=1)) - attraction) @ coords

        momentum = EARLY_MOMENTUM if step < MOMENTUM_SWITCH else LATE_MOMENTUM
        velocity = momentum * velocity - cfg.learning_rate * grad
        candidate = coords + velocity
        candidate -= candidate.mean(axis=0)
        q_new, kernel_new, kl_new = evaluate(candidate)

        if step >= EXAGGERATION_STEPS and kl_new > kl:
            velocity = np.zeros_like(velocity)
            step_size = cfg.learning_rate
            for _ in range(60):
                candidate = coords - step_size * grad
                candidate -= candidate.mean(axis=0)
                q_new, kernel_new, kl_new = evaluate(candidate)
                if kl_new <= kl:
                    break
                step_size *= 0.5
            else:  # numerically at a stationary point
                candidate, q_new, kernel_new, kl_new = coords, q, kernel, kl

        coords, q, kernel, kl = candidate, q_new, kernel_new, kl_new
        trace[step] = kl

    return coords, trace
