"""Group-level 0-1 metrics: per-group, worst-group and worst-class accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import GroupedDataset
from .nn import softmax_cross_entropy


class EmptyGroupError(ValueError):
    pass


@dataclass
class Metrics:
    per_group_accuracy: dict[tuple[int, int], float]
    per_group_count: dict[tuple[int, int], int]
    per_class_accuracy: dict[int, float]
    average_accuracy: float
    worst_group_accuracy: float
    worst_class_accuracy: float
    loss: float = float("nan")

    @property
    def worst_group(self) -> tuple[int, int]:
        return min(self.per_group_accuracy, key=lambda g: (self.per_group_accuracy[g], g))


def metrics_from_predictions(pred: np.ndarray, ds: GroupedDataset, loss: float = float("nan")) -> Metrics:
    """Accuracies from predicted labels. Every group of ``ds.groups`` must be populated."""
    pred = np.asarray(pred)
    if len(pred) != len(ds):
        raise ValueError(f"{len(pred)} predictions for {len(ds)} examples")
    if len(ds) == 0:
        raise EmptyGroupError("dataset is empty")
    correct = pred == ds.y
    table = ds.group_table()
    missing = [g for g in ds.groups if g not in table]
    if missing:
        raise EmptyGroupError(f"{ds.split} split has no examples in groups {missing}")
    per_group = {g: float(correct[rows].mean()) for g, rows in table.items()}
    counts = {g: len(rows) for g, rows in table.items()}
    per_class = {}
    for c in range(ds.n_classes):
        rows = ds.y == c
        if rows.any():
            per_class[c] = float(correct[rows].mean())
    return Metrics(
        per_group_accuracy=per_group,
        per_group_count=counts,
        per_class_accuracy=per_class,
        average_accuracy=float(correct.mean()),
        worst_group_accuracy=min(per_group.values()),
        worst_class_accuracy=min(per_class.values()),
        loss=loss,
    )


def evaluate(model, ds: GroupedDataset, mode: str | None = None, neuron_keep=None) -> Metrics:
    """Evaluate ``model`` on ``ds`` in FairDropout ``mode`` ("train" or "test")."""
    logits = np.atleast_2d(model.forward(ds.features, ds.ids, mode, neuron_keep))
    losses, _ = softmax_cross_entropy(logits, ds.y)
    return metrics_from_predictions(np.argmax(logits, axis=1), ds, float(losses.mean()))


def generalization_gap(train: Metrics, test: Metrics) -> dict[tuple[int, int], float]:
    """Train minus test accuracy for each group present in both."""
    return {g: train.per_group_accuracy[g] - test.per_group_accuracy[g]
            for g in train.per_group_accuracy if g in test.per_group_accuracy}
