"""Open-set protocol: train the embedder without some classes, then see
how well nearest-neighbor lookup recovers them anyway.

The withheld classes are excluded from embedder training but their
train-split samples still enter the reference space (with true labels),
so test samples of a withheld class can match reference points the model
never trained on. Seen and unseen test subsets are scored separately,
each over the full class set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import embedder
from .data import Dataset
from .metrics import MetricsReport, classification_metrics, confusion_matrix
from .partition import EmbeddingSpace, knn_classify_batch

DEFAULT_NEIGHBORS = 5


class OpenSetError(ValueError):
    """Withheld-class set violates the protocol preconditions."""


@dataclass(frozen=True)
class OpenSetSpec:
    withheld_classes: frozenset[int]
    train: embedder.TrainConfig
    k: int = DEFAULT_NEIGHBORS

    def __post_init__(self):
        object.__setattr__(self, "withheld_classes",
                           frozenset(int(c) for c in self.withheld_classes))
        if not self.withheld_classes:
            raise OpenSetError("withheld set must not be empty")
        if any(c < 0 for c in self.withheld_classes):
            raise OpenSetError("negative class id in withheld set")
        if self.k < 1:
            raise OpenSetError(f"k must be at least 1, got {self.k}")


@dataclass(frozen=True)
class OpenSetResult:
    model: embedder.Model
    history: list
    seen: MetricsReport
    unseen: MetricsReport
    # the unseen headline number can be read two ways; both are reported
    unseen_accuracy_weighted: float
    unseen_accuracy_macro: float
    predictions: np.ndarray
    exposure: dict[int, int] = field(default_factory=dict)


def _check_spec(spec: OpenSetSpec, train_set: Dataset) -> np.ndarray:
    class_count = train_set.class_count
    withheld = np.array(sorted(spec.withheld_classes), dtype=np.intp)
    if withheld.max() >= class_count:
        raise OpenSetError(f"withheld class {withheld.max()} outside "
                           f"[0, {class_count})")
    if len(spec.withheld_classes) >= class_count:
        raise OpenSetError("withheld set must be a strict subset of classes")
    if class_count - len(spec.withheld_classes) < 2:
        raise OpenSetError("need at least 2 classes left for training")
    present = np.unique(train_set.labels)
    missing = sorted(set(withheld.tolist()) - set(present.tolist()))
    if missing:
        raise OpenSetError(f"withheld classes {missing} have no training "
                           "samples to place in the reference space")
    return withheld


def run_open_set(train_set: Dataset, test_set: Dataset,
                 model_cfg: embedder.ModelConfig,
                 spec: OpenSetSpec) -> OpenSetResult:
    """Train on the non-withheld classes, score seen/unseen test subsets.

    The model head spans the full class set; withheld ids simply never
    occur in its training batches (tallied in the returned exposure map).
    """
    withheld = _check_spec(spec, train_set)

    keep = ~np.isin(train_set.labels, withheld)
    model = embedder.build_model(model_cfg, seed=spec.train.seed)
    exposure: dict[int, int] = {}
    history = embedder.train(model, train_set.subset(np.flatnonzero(keep)),
                             spec.train, exposure_counter=exposure)
    leaked = {c: exposure.get(int(c), 0) for c in withheld
              if exposure.get(int(c), 0)}
    if leaked:
        raise OpenSetError(f"withheld classes reached training: {leaked}")

    reference = EmbeddingSpace(points=model.embed(train_set.samples),
                               labels=train_set.labels,
                               class_count=train_set.class_count)
    k = min(spec.k, reference.n)
    predictions = knn_classify_batch(reference, model.embed(test_set.samples), k)

    unseen_mask = np.isin(test_set.labels, withheld)
    reports = {}
    for name, mask in (("seen", ~unseen_mask), ("unseen", unseen_mask)):
        if not mask.any():
            raise OpenSetError(f"test split has no {name}-class samples")
        reports[name] = classification_metrics(confusion_matrix(
            test_set.labels[mask], predictions[mask], train_set.class_count))

    return OpenSetResult(
        model=model,
        history=history,
        seen=reports["seen"],
        unseen=reports["unseen"],
        unseen_accuracy_weighted=reports["unseen"].accuracy_weighted,
        unseen_accuracy_macro=reports["unseen"].recall_macro,
        predictions=predictions,
        exposure=exposure,
    )
