"""Classifiers and clustering over the learned metric space.

Five partitioners with deliberately plain training procedures: kNN with a
documented tie-break, multinomial logistic regression by full-batch
gradient descent, one-vs-rest linear SVMs by deterministic subgradient
descent, a one-hidden-layer MLP head on the autodiff tape, and a
diagonal-covariance Gaussian mixture fit by EM.

Every fit is deterministic given its seed; every predictor is a pure
function of (model, query).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import container, losses
from .autodiff import Tensor

TAG_MLP = 51
TAG_GMM = 52

COV_FLOOR = 1e-6


class PartitionError(ValueError):
    """Invalid embedding space, query, or fit request."""


@dataclass
class EmbeddingSpace:
    """N x D points with optional aligned labels over class_count classes."""

    points: np.ndarray
    class_count: int
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise PartitionError(f"points must be (N, D), got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise PartitionError("points contain non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.intp)
            if self.labels.shape != (self.points.shape[0],):
                raise PartitionError("need one label per point")
            if self.labels.size and (self.labels.min() < 0
                                     or self.labels.max() >= self.class_count):
                raise PartitionError("label outside [0, class_count)")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def _require_labels(space: EmbeddingSpace):
    if space.labels is None:
        raise PartitionError("this partitioner needs labeled points")
    if space.n == 0:
        raise PartitionError("empty training set")
    if not np.isfinite(space.points).all():
        raise PartitionError("non-finite features")


# ---------------------------------------------------------------------------
# k nearest neighbors


def knn_classify(train: EmbeddingSpace, query, k: int) -> int:
    """Majority label among the k nearest training points.

    Count ties break toward the class with the smallest mean distance among
    its tied members, then toward the lowest class index. Equidistant
    neighbors at the cut boundary resolve by lowest point index.
    """
    _require_labels(train)
    if not 1 <= k <= train.n:
        raise PartitionError(f"k={k} outside [1, {train.n}]")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (train.dim,):
        raise PartitionError(f"query shape {q.shape} does not match D={train.dim}")
    d = np.linalg.norm(train.points - q, axis=1)
    nearest = np.argsort(d, kind="stable")[:k]
    votes = train.labels[nearest]
    counts = np.bincount(votes, minlength=train.class_count)
    top = counts.max()
    tied = np.flatnonzero(counts == top)
    if tied.size == 1:
        return int(tied[0])
    means = np.array([d[nearest[votes == c]].mean() for c in tied])
    # argmin picks the first (lowest class index) among exact mean ties
    return int(tied[np.argmin(means)])


def knn_classify_batch(train: EmbeddingSpace, queries, k: int) -> np.ndarray:
    qs = np.asarray(queries, dtype=np.float64)
    return np.array([knn_classify(train, q, k) for q in qs], dtype=np.intp)


# ---------------------------------------------------------------------------
# multinomial logistic regression


@dataclass
class LogisticModel:
    weights: np.ndarray  # (D+1, K), last row is the bias
    iterations: int = 0

    def save(self, path):
        container.save_tensors(path, {"kind": "logistic"}, {"weights": self.weights})

    @classmethod
    def load(cls, path):
        header, tensors = container.load_tensors(path)
        if header.get("kind") != "logistic":
            raise PartitionError(f"{path}: not a logistic model")
        return cls(weights=tensors["weights"])


def _augment_ones(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((x.shape[0], 1))])


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def fit_logistic(train: EmbeddingSpace, max_iterations: int = 5000,
                 grad_tolerance: float = 1e-6) -> LogisticModel:
    """Full-batch gradient descent on multinomial cross-entropy.

    The step size is 1/L with L the softmax-Hessian bound 0.5 * lambda_max
    of the feature Gram matrix, so descent is monotone; iteration stops at
    gradient norm < 1e-6 or the iteration cap.
    """
    _require_labels(train)
    x = _augment_ones(train.points)
    n, d1 = x.shape
    k = train.class_count
    onehot = np.zeros((n, k))
    onehot[np.arange(n), train.labels] = 1.0

    lipschitz = 0.5 * float(np.linalg.eigvalsh(x.T @ x / n)[-1])
    step = 1.0 / max(lipschitz, 1e-12)
    w = np.zeros((d1, k))
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        p = _softmax_rows(x @ w)
        grad = x.T @ (p - onehot) / n
        if np.linalg.norm(grad) < grad_tolerance:
            break
        w -= step * grad
    return LogisticModel(weights=w, iterations=iterations)


def predict_logistic(model: LogisticModel, query) -> int:
    q = np.asarray(query, dtype=np.float64)
    logits = np.append(q, 1.0) @ model.weights
    return int(np.argmax(logits))


# ---------------------------------------------------------------------------
# linear SVM (one-vs-rest)


@dataclass
class SvmModel:
    weights: np.ndarray  # (D+1, K), one column per one-vs-rest machine

    def save(self, path):
        container.save_tensors(path, {"kind": "svm"}, {"weights": self.weights})

    @classmethod
    def load(cls, path):
        header, tensors = container.load_tensors(path)
        if header.get("kind") != "svm":
            raise PartitionError(f"{path}: not an svm model")
        return cls(weights=tensors["weights"])


def fit_linear_svm(train: EmbeddingSpace, c: float = 1.0,
                   iterations: int = 2000) -> SvmModel:
    """One-vs-rest hinge loss with L2 regularization (C=1.0 default).

    Deterministic full-batch subgradient descent with the 1/(lambda * t)
    step schedule and iterate projection onto the 1/sqrt(lambda) ball.
    """
    _require_labels(train)
    x = _augment_ones(train.points)
    n, d1 = x.shape
    lam = 1.0 / (c * n)
    radius = 1.0 / np.sqrt(lam)
    w = np.zeros((d1, train.class_count))
    for t in range(1, iterations + 1):
        step = 1.0 / (lam * t)
        margins = x @ w
        signs = np.where(
            train.labels[:, None] == np.arange(train.class_count)[None, :], 1.0, -1.0)
        active = (signs * margins) < 1.0
        subgrad = lam * w - x.T @ (signs * active) / n
        w -= step * subgrad
        norm = np.linalg.norm(w)
        if norm > radius:
            w *= radius / norm
    return SvmModel(weights=w)


def predict_svm(model: SvmModel, query) -> int:
    q = np.asarray(query, dtype=np.float64)
    margins = np.append(q, 1.0) @ model.weights
    return int(np.argmax(margins))


# ---------------------------------------------------------------------------
# MLP head


@dataclass
class MlpModel:
    params: dict

    def save(self, path):
        container.save_tensors(path, {"kind": "mlp_head"},
                               {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path):
        header, tensors = container.load_tensors(path)
        if header.get("kind") != "mlp_head":
            raise PartitionError(f"{path}: not an mlp head model")
        return cls(params={k: Tensor(v, requires_grad=True)
                           for k, v in tensors.items()})


def _mlp_logits(params: dict, x: Tensor) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(x, params["w1"]), params["b1"]))
    return ad.add(ad.matmul(h, params["w2"]), params["b2"])


def fit_mlp_head(train: EmbeddingSpace, seed: int, hidden: int = 64,
                 epochs: int = 200, learning_rate: float = 0.05,
                 batch_size: int = 32) -> MlpModel:
    """One hidden relu layer trained by mini-batch SGD on cross-entropy."""
    _require_labels(train)
    rng = np.random.default_rng([seed, TAG_MLP])
    d, k = train.dim, train.class_count

    def uniform(bound, size):
        return Tensor(rng.uniform(-bound, bound, size=size), requires_grad=True)

    params = {
        "w1": uniform(1.0 / np.sqrt(d), (d, hidden)),
        "b1": uniform(1.0 / np.sqrt(d), hidden),
        "w2": uniform(1.0 / np.sqrt(hidden), (hidden, k)),
        "b2": uniform(1.0 / np.sqrt(hidden), k),
    }
    order = np.arange(train.n)
    for epoch in range(epochs):
        epoch_rng = np.random.default_rng([seed, TAG_MLP, epoch])
        epoch_rng.shuffle(order)
        for start in range(0, train.n, batch_size):
            idx = order[start:start + batch_size]
            loss = losses.softmax_cross_entropy(
                _mlp_logits(params, Tensor(train.points[idx])), train.labels[idx])
            for p in params.values():
                p.zero_grad()
            ad.backward(loss)
            for p in params.values():
                p.data -= learning_rate * p.grad
    return MlpModel(params=params)


def predict_mlp(model: MlpModel, query) -> int:
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    logits = _mlp_logits(model.params, Tensor(q)).data
    return int(np.argmax(logits[0]))


# ---------------------------------------------------------------------------
# Gaussian mixture (diagonal covariance)


@dataclass
class GmmModel:
    weights: np.ndarray       # (K,)
    means: np.ndarray         # (K, D)
    variances: np.ndarray     # (K, D), diagonal covariances, floored
    ll_trace: list = field(default_factory=list)

    def save(self, path):
        container.save_tensors(path, {"kind": "gmm"}, {
            "weights": self.weights, "means": self.means,
            "variances": self.variances,
            "ll_trace": np.asarray(self.ll_trace, dtype=np.float64),
        })

    @classmethod
    def load(cls, path):
        header, tensors = container.load_tensors(path)
        if header.get("kind") != "gmm":
            raise PartitionError(f"{path}: not a gmm model")
        return cls(weights=tensors["weights"], means=tensors["means"],
                   variances=tensors["variances"],
                   ll_trace=list(tensors["ll_trace"]))


def _gmm_log_prob(points, weights, means, variances):
    """(N, K) log of weight_k * N(x | mean_k, diag variance_k)."""
    diff = points[:, None, :] - means[None, :, :]
    quad = (diff ** 2 / variances[None, :, :]).sum(axis=2)
    log_det = np.log(variances).sum(axis=1)
    d = points.shape[1]
    return (np.log(weights)[None, :]
            - 0.5 * (d * np.log(2.0 * np.pi) + log_det[None, :] + quad))


def _kmeans_pp_centers(points, k, rng):
    n = points.shape[0]
    centers = [points[int(rng.integers(n))]]
    for _ in range(k - 1):
        d2 = np.min(
            [((points - c) ** 2).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(points[int(rng.integers(n))])
            continue
        centers.append(points[int(rng.choice(n, p=d2 / total))])
    return np.stack(centers)


def fit_gmm(points, k: int, seed: int, max_iterations: int = 500,
            tolerance: float = 1e-7) -> GmmModel:
    """EM for a diagonal-covariance mixture, k-means++ initialization.

    Stops when the mean log-likelihood gain drops below 1e-7 or at the
    iteration cap; the recorded trace is non-decreasing (EM monotonicity).
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise PartitionError(f"points must be (N, D), got {x.shape}")
    n, d = x.shape
    if k < 1 or k > n:
        raise PartitionError(f"component count {k} outside [1, {n}]")
    rng = np.random.default_rng([seed, TAG_GMM])

    means = _kmeans_pp_centers(x, k, rng)
    variances = np.tile(np.maximum(x.var(axis=0), COV_FLOOR), (k, 1))
    weights = np.full(k, 1.0 / k)

    trace = []
    prev_ll = -np.inf
    for _ in range(max_iterations):
        log_joint = _gmm_log_prob(x, weights, means, variances)
        row_max = log_joint.max(axis=1, keepdims=True)
        log_norm = row_max[:, 0] + np.log(np.exp(log_joint - row_max).sum(axis=1))
        ll = float(log_norm.mean())
        trace.append(ll)
        resp = np.exp(log_joint - log_norm[:, None])

        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-12)
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        sq = resp.T @ (x ** 2) / nk[:, None]
        variances = np.maximum(sq - means ** 2, COV_FLOOR)

        if ll - prev_ll < tolerance and np.isfinite(prev_ll):
            break
        prev_ll = ll
    return GmmModel(weights=weights, means=means, variances=variances,
                    ll_trace=trace)


def gmm_assign(model: GmmModel, query) -> int:
    """Component with the highest responsibility for the query point."""
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    log_joint = _gmm_log_prob(q, model.weights, model.means, model.variances)
    return int(np.argmax(log_joint[0]))


def gmm_assign_batch(model: GmmModel, queries) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    log_joint = _gmm_log_prob(q, model.weights, model.means, model.variances)
    return np.argmax(log_joint, axis=1).astype(np.intp)
