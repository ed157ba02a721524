"""Embedding network and its SGD training loop.

The backbone is deliberately small: two conv+pool blocks and a dense
embedding layer for image grids, a two-layer MLP for feature vectors. An
optional linear head on top of the embedding produces class logits for the
softmax and hybrid losses.

Training is plain SGD (no momentum) over stratified P-classes-times-K-samples
batches with in-batch hard triplet mining. Every random choice draws from a
stream named by (seed, purpose tag, ...), so runs are bitwise-reproducible
and augmentation is schedule-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import container, losses, mining
from .autodiff import Tensor
from .data import Dataset, augment, augment_rng
from .losses import LossConfig

TAG_INIT = 41
TAG_BATCH = 42
TAG_VAL = 43

VAL_FRACTION = 0.1
EMBED_CHUNK = 256

LOSS_KINDS = ("contrastive", "triplet", "rtl", "softmax", "hybrid", "hybrid_tl")
METRIC_ONLY = ("contrastive", "triplet", "rtl")
NEEDS_HEAD = ("softmax", "hybrid", "hybrid_tl")


class ModelError(ValueError):
    """Bad architecture spec or shape-incompatible input."""


class TrainError(RuntimeError):
    """Training aborted (non-finite loss, invalid setup)."""


def default_architecture(input_shape, embedding_dim: int):
    if isinstance(input_shape, int):
        return [("dense", 64), ("relu",), ("dense", embedding_dim)]
    return [("conv", 8, 3), ("relu",), ("pool", 2),
            ("conv", 16, 3), ("relu",), ("pool", 2),
            ("flatten",), ("dense", embedding_dim)]


@dataclass(frozen=True)
class ModelConfig:
    """Network shape: input, layer stack, embedding width, optional head.

    ``input_shape`` is (H, W) for grids or an int feature length;
    ``num_classes`` 0 means no classification head. ``architecture`` None
    selects the default backbone for the input kind.
    """

    input_shape: object
    embedding_dim: int = 128
    num_classes: int = 0
    architecture: tuple | None = None

    def __post_init__(self):
        if isinstance(self.input_shape, (list, tuple)):
            h, w = self.input_shape
            if h < 1 or w < 1:
                raise ModelError("grid input_shape must be positive")
            object.__setattr__(self, "input_shape", (int(h), int(w)))
        elif isinstance(self.input_shape, (int, np.integer)):
            if self.input_shape < 1:
                raise ModelError("feature length must be positive")
            object.__setattr__(self, "input_shape", int(self.input_shape))
        else:
            raise ModelError(f"bad input_shape: {self.input_shape!r}")
        if self.embedding_dim < 1:
            raise ModelError("embedding_dim must be positive")
        if self.num_classes < 0:
            raise ModelError("num_classes must be >= 0")
        arch = self.architecture
        if arch is None:
            arch = default_architecture(self.input_shape, self.embedding_dim)
        object.__setattr__(self, "architecture", tuple(tuple(l) for l in arch))
        last = self.architecture[-1]
        if last[0] != "dense" or last[1] != self.embedding_dim:
            raise ModelError("final layer must be dense with width embedding_dim")
        _plan_layers(self)  # raises on any inconsistent layer


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str
    seed: int
    epochs: int = 100
    learning_rate: float = 0.01
    batch_p: int = 8
    batch_k: int = 4
    loss: LossConfig = field(default_factory=LossConfig)
    augment_ops: tuple = ()

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise TrainError(f"unknown loss_kind {self.loss_kind!r}")
        if self.epochs < 1:
            raise TrainError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise TrainError("learning_rate must be >= 0")
        if self.batch_p < 2 or self.batch_k < 1:
            raise TrainError("batch spec needs P >= 2 classes, K >= 1 samples")
        object.__setattr__(self, "augment_ops", tuple(self.augment_ops))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    softmax_loss: float
    rtl_loss: float
    val_accuracy: float


def _plan_layers(config):
    """Walk the layer spec, returning (index, spec, in_shape, out_shape) per
    layer. Grid shapes are (channels, H, W); flat shapes are plain ints.
    Raises naming the first inconsistent layer.
    """
    shape = (1, *config.input_shape) if isinstance(config.input_shape, tuple) \
        else int(config.input_shape)
    plan = []
    for i, layer in enumerate(config.architecture):
        kind = layer[0]
        where = f"layer {i} ({kind})"
        if kind == "conv":
            if not isinstance(shape, tuple):
                raise ModelError(f"{where}: conv needs grid input, have flat {shape}")
            _, out_ch, k = layer[0], int(layer[1]), int(layer[2])
            c, h, w = shape
            if out_ch < 1 or k < 1:
                raise ModelError(f"{where}: bad conv parameters")
            if h < k or w < k:
                raise ModelError(f"{where}: kernel {k} exceeds input {h}x{w}")
            out_shape = (out_ch, h - k + 1, w - k + 1)
        elif kind == "pool":
            if not isinstance(shape, tuple):
                raise ModelError(f"{where}: pool needs grid input")
            wdw = int(layer[1])
            c, h, w = shape
            if wdw < 1:
                raise ModelError(f"{where}: bad pool window")
            if h < wdw or w < wdw:
                raise ModelError(f"{where}: window {wdw} exceeds input {h}x{w}")
            out_shape = (c, h // wdw, w // wdw)
        elif kind == "relu":
            out_shape = shape
        elif kind == "flatten":
            if not isinstance(shape, tuple):
                raise ModelError(f"{where}: flatten needs grid input")
            out_shape = int(np.prod(shape))
        elif kind == "dense":
            if isinstance(shape, tuple):
                raise ModelError(f"{where}: dense needs flat input, have {shape}")
            out_shape = int(layer[1])
            if out_shape < 1:
                raise ModelError(f"{where}: bad dense width")
        else:
            raise ModelError(f"{where}: unknown layer kind")
        plan.append((i, layer, shape, out_shape))
        shape = out_shape
    return plan


class Model:
    """Parameterized embedding network; parameters live in a named dict."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @staticmethod
    def _plan(config):
        return _plan_layers(config)

    @classmethod
    def build(cls, config: ModelConfig, seed: int) -> "Model":
        """Initialize parameters with the scaled-uniform fan-in rule."""
        rng = np.random.default_rng([seed, TAG_INIT])
        params: dict[str, Tensor] = {}

        def uniform(bound, size):
            return Tensor(rng.uniform(-bound, bound, size=size), requires_grad=True)

        for i, layer, in_shape, _ in cls._plan(config):
            if layer[0] == "conv":
                out_ch, k = int(layer[1]), int(layer[2])
                in_ch = in_shape[0]
                bound = 1.0 / np.sqrt(in_ch * k * k)
                params[f"layer{i}.weight"] = uniform(bound, (out_ch, in_ch, k, k))
                params[f"layer{i}.bias"] = uniform(bound, out_ch)
            elif layer[0] == "dense":
                width = int(layer[1])
                bound = 1.0 / np.sqrt(in_shape)
                params[f"layer{i}.weight"] = uniform(bound, (in_shape, width))
                params[f"layer{i}.bias"] = uniform(bound, width)
        if config.num_classes:
            bound = 1.0 / np.sqrt(config.embedding_dim)
            params["head.weight"] = uniform(bound, (config.embedding_dim,
                                                    config.num_classes))
            params["head.bias"] = uniform(bound, config.num_classes)
        return cls(config, params)

    # -- forward ----------------------------------------------------------

    def _check_input(self, samples: np.ndarray):
        want = self.config.input_shape
        if isinstance(want, tuple):
            if samples.ndim != 3 or samples.shape[1:] != want:
                raise ModelError(f"expected samples (N, {want[0]}, {want[1]}), "
                                 f"got {samples.shape}")
        elif samples.ndim != 2 or samples.shape[1] != want:
            raise ModelError(f"expected samples (N, {want}), got {samples.shape}")

    def forward(self, batch: Tensor) -> Tensor:
        """Embed a batch tensor: (N, H, W) grids or (N, F) vectors -> (N, D)."""
        x = batch
        if isinstance(self.config.input_shape, tuple):
            n = x.shape[0]
            x = ad.reshape(x, (n, 1, *self.config.input_shape))
        for i, layer, _, _ in self._plan(self.config):
            kind = layer[0]
            if kind == "conv":
                x = ad.conv2d(x, self.params[f"layer{i}.weight"],
                              self.params[f"layer{i}.bias"])
            elif kind == "pool":
                x = ad.mean_pool2d(x, int(layer[1]))
            elif kind == "relu":
                x = ad.relu(x)
            elif kind == "flatten":
                x = ad.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
            elif kind == "dense":
                x = ad.add(ad.matmul(x, self.params[f"layer{i}.weight"]),
                           self.params[f"layer{i}.bias"])
        return x

    def logits(self, embeddings: Tensor) -> Tensor:
        if "head.weight" not in self.params:
            raise ModelError("model has no classification head")
        return ad.add(ad.matmul(embeddings, self.params["head.weight"]),
                      self.params["head.bias"])

    def embed(self, samples) -> np.ndarray:
        """Plain-array embeddings, chunked forward passes, no training state."""
        x = np.asarray(samples, dtype=np.float64)
        if x.shape[0] == 0:
            return np.empty((0, self.config.embedding_dim))
        self._check_input(x)
        out = [self.forward(Tensor(x[i:i + EMBED_CHUNK])).data
               for i in range(0, x.shape[0], EMBED_CHUNK)]
        return np.concatenate(out)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        header = {
            "kind": "embedder",
            "input_shape": list(self.config.input_shape)
            if isinstance(self.config.input_shape, tuple) else self.config.input_shape,
            "embedding_dim": self.config.embedding_dim,
            "num_classes": self.config.num_classes,
            "architecture": [list(l) for l in self.config.architecture],
        }
        container.save_tensors(path, header,
                               {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path) -> "Model":
        header, tensors = container.load_tensors(path)
        if header.get("kind") != "embedder":
            raise ModelError(f"{path}: not an embedder checkpoint")
        shape = header["input_shape"]
        config = ModelConfig(
            input_shape=tuple(shape) if isinstance(shape, list) else shape,
            embedding_dim=header["embedding_dim"],
            num_classes=header["num_classes"],
            architecture=[tuple(l) for l in header["architecture"]])
        params = {k: Tensor(v, requires_grad=True) for k, v in tensors.items()}
        return cls(config, params)


def build_model(config: ModelConfig, seed: int) -> Model:
    return Model.build(config, seed)


# ---------------------------------------------------------------------------
# training


def _stratified_carveout(labels: np.ndarray, fraction: float, rng):
    """Split indices into (main, held) with per-class proportions +-1."""
    main, held = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx.copy()
        rng.shuffle(idx)
        n_held = int(round(idx.size * fraction))
        if idx.size >= 2:
            n_held = min(max(n_held, 1), idx.size - 1)
        held.append(idx[:n_held])
        main.append(idx[n_held:])
    return np.sort(np.concatenate(main)), np.sort(np.concatenate(held))


def _epoch_batches(labels: np.ndarray, p: int, k: int, rng):
    """Stratified batches of up to p classes x k samples; every index
    appears exactly once per epoch."""
    queues = {}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx.copy()
        rng.shuffle(idx)
        queues[int(c)] = list(idx)
    classes = sorted(queues)
    rng.shuffle(classes)
    batches = []
    while any(queues[c] for c in classes):
        nonempty = [c for c in classes if queues[c]]
        chosen = nonempty[:p]
        batch = []
        for c in chosen:
            take = queues[c][:k]
            queues[c] = queues[c][k:]
            batch.extend(take)
        # rotate so different classes lead the next batch
        classes = classes[len(chosen):] + classes[:len(chosen)]
        batches.append(np.asarray(batch, dtype=np.intp))
    return batches


def _batch_loss(model: Model, cfg: TrainConfig, batch_x: Tensor,
                batch_y: np.ndarray):
    """Build the configured loss for one batch.

    Returns (loss Tensor or None, softmax component or None, metric
    component or None); None components were not computed for this batch.
    A None loss means the batch offers nothing to train on (e.g. a single
    class under a metric-only loss).
    """
    kind = cfg.loss_kind
    embeddings = model.forward(batch_x)

    ce = None
    if kind in NEEDS_HEAD:
        ce = losses.softmax_cross_entropy(model.logits(embeddings), batch_y)
        if kind == "softmax" or cfg.loss.lambda_mix == 0.0:
            return ce, ce.item(), None

    mined = mining.batch_hard(batch_y, points=embeddings.data)
    if mined.empty:
        if ce is not None:
            return ce, ce.item(), None
        return None, None, None

    a = ad.take_rows(embeddings, mined.anchor)
    p = ad.take_rows(embeddings, mined.positive)
    n = ad.take_rows(embeddings, mined.negative)

    if kind == "contrastive":
        first = ad.take_rows(embeddings, np.concatenate([mined.anchor, mined.anchor]))
        second = ad.take_rows(embeddings, np.concatenate([mined.positive, mined.negative]))
        flags = np.concatenate([np.zeros(len(mined)), np.ones(len(mined))])
        metric = losses.contrastive_loss(first, second, flags,
                                         margin=cfg.loss.margin_alpha)
        return metric, None, metric.item()
    if kind == "triplet":
        metric = losses.triplet_loss(a, p, n, margin=cfg.loss.margin_alpha)
        return metric, None, metric.item()
    if kind == "rtl":
        metric = losses.reciprocal_triplet_loss(a, p, n, epsilon=cfg.loss.rtl_epsilon)
        return metric, None, metric.item()
    if kind == "hybrid":
        metric = losses.reciprocal_triplet_loss(a, p, n, epsilon=cfg.loss.rtl_epsilon)
    else:  # hybrid_tl
        metric = losses.triplet_loss(a, p, n, margin=cfg.loss.margin_alpha)
    total = ad.add(ce, ad.mul(metric, cfg.loss.lambda_mix))
    return total, ce.item(), metric.item()


def _validation_accuracy(model: Model, dataset: Dataset, train_idx, val_idx,
                         k: int = 5) -> float:
    from .partition import EmbeddingSpace, knn_classify

    ref = EmbeddingSpace(points=model.embed(dataset.samples[train_idx]),
                         labels=dataset.labels[train_idx],
                         class_count=dataset.class_count)
    queries = model.embed(dataset.samples[val_idx])
    k = min(k, ref.points.shape[0])
    pred = np.array([knn_classify(ref, q, k) for q in queries])
    return float((pred == dataset.labels[val_idx]).mean())


def train(model: Model, dataset: Dataset, cfg: TrainConfig,
          exposure_counter: dict | None = None):
    """SGD-train the model in place; returns the per-epoch history.

    Aborts with epoch/batch context if the loss goes non-finite. When
    `exposure_counter` is given, every batch draw is tallied into it as
    class id -> sample count, so callers can audit what the model saw.
    """
    if cfg.loss_kind != "softmax" and np.unique(dataset.labels).size < 2:
        raise TrainError(f"{cfg.loss_kind} loss needs at least 2 classes")
    if cfg.loss_kind in NEEDS_HEAD and "head.weight" not in model.params:
        raise TrainError(f"{cfg.loss_kind} loss needs a classification head "
                         "(set num_classes on the model)")
    if dataset.n == 0:
        raise TrainError("empty dataset")

    val_rng = np.random.default_rng([cfg.seed, TAG_VAL])
    train_idx, val_idx = _stratified_carveout(dataset.labels, VAL_FRACTION, val_rng)
    trainable = sorted(model.params)

    history: list[EpochRecord] = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, TAG_BATCH, epoch])
        batches = _epoch_batches(dataset.labels[train_idx], cfg.batch_p,
                                 cfg.batch_k, rng)
        ce_sum, ce_batches = 0.0, 0
        metric_sum, metric_batches = 0.0, 0
        for batch_no, local in enumerate(batches):
            idx = train_idx[local]
            if exposure_counter is not None:
                ids, counts = np.unique(dataset.labels[idx], return_counts=True)
                for cid, cnt in zip(ids, counts):
                    exposure_counter[int(cid)] = (
                        exposure_counter.get(int(cid), 0) + int(cnt))
            x = dataset.samples[idx]
            if cfg.augment_ops:
                x = np.stack([
                    augment(x[i], cfg.augment_ops,
                            augment_rng(cfg.seed, epoch, int(idx[i])))
                    for i in range(x.shape[0])
                ])
            loss, ce_val, metric_val = _batch_loss(
                model, cfg, Tensor(x), dataset.labels[idx])
            if loss is None:
                continue
            if not np.isfinite(loss.item()):
                raise TrainError(f"non-finite loss at epoch {epoch} "
                                 f"batch {batch_no}")
            if ce_val is not None:
                ce_sum += ce_val
                ce_batches += 1
            if metric_val is not None:
                metric_sum += metric_val
                metric_batches += 1
            for name in trainable:
                model.params[name].zero_grad()
            ad.backward(loss)
            for name in trainable:
                p = model.params[name]
                p.data -= cfg.learning_rate * p.grad
        history.append(EpochRecord(
            epoch=epoch,
            softmax_loss=ce_sum / ce_batches if ce_batches else 0.0,
            rtl_loss=metric_sum / metric_batches if metric_batches else 0.0,
            val_accuracy=_validation_accuracy(model, dataset, train_idx, val_idx),
        ))
    return history
