"""Seeded mini-batch SGD, per-epoch history and worst-class hyperparameter sweeps."""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .data import GroupedDataset
from .errors import ConfigError, TrainingDiverged
from .fairdropout import MODES, TEST, TRAIN
from .metrics import Metrics, evaluate
from .nn import Model

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 0.0
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class HistoryEntry:
    epoch: int
    split: str
    mode: str
    metrics: Metrics


@dataclass
class History:
    entries: list[HistoryEntry] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)

    def get(self, split: str, mode: str) -> list[Metrics]:
        return [e.metrics for e in self.entries if e.split == split and e.mode == mode]

    def final(self, split: str, mode: str) -> Metrics:
        return self.get(split, mode)[-1]

    def rows(self) -> list[dict]:
        """One row per (epoch, split) with both FairDropout modes side by side."""
        by_key: dict[tuple[int, str], dict] = {}
        for e in self.entries:
            row = by_key.setdefault((e.epoch, e.split), {
                "epoch": e.epoch, "split": e.split,
                "train_loss": self.train_loss[e.epoch - 1] if e.epoch >= 1 else float("nan"),
            })
            m = e.metrics
            p = f"{e.mode}_mode_"
            row[p + "loss"] = m.loss
            row[p + "avg"] = m.average_accuracy
            row[p + "wga"] = m.worst_group_accuracy
            row[p + "wca"] = m.worst_class_accuracy
            for (y, a), acc in sorted(m.per_group_accuracy.items()):
                row[f"{p}acc_y{y}_a{a}"] = acc
        return list(by_key.values())


def class_weights(y: np.ndarray, n_classes: int) -> np.ndarray:
    """Inverse class frequency, scaled so each class carries total weight N / C."""
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    present = counts > 0
    per_class = np.zeros(n_classes)
    per_class[present] = len(y) / (present.sum() * counts[present])
    return per_class[y]


def sgd_step(model: Model, grads, lr: float, weight_decay: float) -> None:
    """In-place ``theta -= lr * (grad + weight_decay * theta)``; biases are not decayed."""
    for layer in model.dense_layers:
        gw = grads.weights[layer.layer_index]
        if weight_decay:
            gw = gw + weight_decay * layer.weights
        layer.weights -= lr * gw
        layer.bias -= lr * grads.bias[layer.layer_index]


def _record(history: History, model: Model, epoch: int, eval_sets: Mapping[str, GroupedDataset]):
    for split, ds in eval_sets.items():
        for mode in MODES:
            history.entries.append(HistoryEntry(epoch, split, mode, evaluate(model, ds, mode)))


def train(model: Model, dataset: GroupedDataset, config: TrainConfig, class_reweight: bool = False,
          eval_sets: Mapping[str, GroupedDataset] | None = None) -> tuple[Model, History]:
    """Train ``model`` in place with train-mode forward passes.

    After every epoch each dataset in ``eval_sets`` (default: the training set)
    is evaluated in both FairDropout modes.
    """
    if dataset.feature_dim != model.in_width:
        raise ConfigError(f"model expects {model.in_width} features, dataset has {dataset.feature_dim}")
    if eval_sets is None:
        eval_sets = {"train": dataset}
    rng = np.random.default_rng(config.seed)
    weights = class_weights(dataset.y, model.n_classes) if class_reweight else None
    history = History()
    n = len(dataset)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            rows = order[start:start + config.batch_size]
            loss, grads = model.loss_and_grad(
                dataset.features[rows], dataset.y[rows], dataset.ids[rows], mode=TRAIN,
                sample_weight=None if weights is None else weights[rows])
            if not np.isfinite(loss):
                exc = TrainingDiverged(epoch, b, loss)
                exc.history = history
                raise exc
            total += loss * len(rows)
            sgd_step(model, grads, config.learning_rate, config.weight_decay)
        history.train_loss.append(total / n)
        _record(history, model, epoch, eval_sets)
        log.debug("epoch %d loss %.4f", epoch, total / n)
    return model, history


# ----- sweeps -----

GRID_KEYS = ("p_gen", "p_mem", "learning_rate", "weight_decay", "layer_position")


def dedupe_grid(grid: Iterable[Mapping]) -> list[dict]:
    seen = set()
    out = []
    for point in grid:
        point = {k: point.get(k) for k in GRID_KEYS}
        key = tuple((k, repr(v)) for k, v in point.items())
        if key not in seen:
            seen.add(key)
            out.append(point)
    return out


def expand_grid(axes: Mapping[str, list]) -> list[dict]:
    """Cartesian product of the grid axes in key order of ``GRID_KEYS``."""
    keys = [k for k in GRID_KEYS if k in axes]
    unknown = set(axes) - set(GRID_KEYS)
    if unknown:
        raise ConfigError(f"unknown grid axes {sorted(unknown)}")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]


@dataclass
class SweepRow:
    index: int
    point: dict
    status: str = "ok"
    error: str = ""
    val: Metrics | None = None
    test: Metrics | None = None
    test_train_mode: Metrics | None = None
    rank: int = 0

    def flat(self) -> dict:
        row = {"rank": self.rank, "index": self.index, **self.point, "status": self.status, "error": self.error}
        for prefix, m in (("val", self.val), ("test", self.test), ("test_train_mode", self.test_train_mode)):
            row[f"{prefix}_wca"] = m.worst_class_accuracy if m else float("nan")
            row[f"{prefix}_avg"] = m.average_accuracy if m else float("nan")
            row[f"{prefix}_wga"] = m.worst_group_accuracy if m else float("nan")
        if self.test:
            for (y, a), acc in sorted(self.test.per_group_accuracy.items()):
                row[f"test_acc_y{y}_a{a}"] = acc
        return row


def sweep(grid: Iterable[Mapping], train_ds: GroupedDataset, val_ds: GroupedDataset, test_ds: GroupedDataset,
          base: TrainConfig, build_model: Callable[[dict], Model], epochs: int | None = None) -> list[SweepRow]:
    """Train one model per grid point and rank by validation worst-class accuracy.

    Ranking only looks at class labels of the validation split; group
    metrics on the test split are carried along for later analysis. Ties are
    broken by validation average accuracy, then by grid order. A run that
    raises is kept with ``status="failed"`` and ranked last.
    """
    points = dedupe_grid(grid)
    rows = []
    for i, point in enumerate(points):
        row = SweepRow(i, point)
        try:
            cfg = TrainConfig(
                learning_rate=base.learning_rate if point["learning_rate"] is None else point["learning_rate"],
                weight_decay=base.weight_decay if point["weight_decay"] is None else point["weight_decay"],
                epochs=base.epochs if epochs is None else epochs,
                batch_size=base.batch_size, seed=base.seed)
            model = build_model(point)
            train(model, train_ds, cfg, eval_sets={})
            row.val = evaluate(model, val_ds, TEST)
            row.test = evaluate(model, test_ds, TEST)
            row.test_train_mode = evaluate(model, test_ds, TRAIN)
        except Exception as exc:  # recorded, not fatal
            log.warning("sweep point %d failed: %s", i, exc)
            row.status = "failed"
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)

    def key(r: SweepRow):
        if r.status != "ok":
            return (1, 0.0, 0.0, r.index)
        return (0, -r.val.worst_class_accuracy, -r.val.average_accuracy, r.index)

    rows.sort(key=key)
    for rank, r in enumerate(rows, start=1):
        r.rank = rank
    return rows


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
