"""Greedy localization of the hidden units an example's prediction depends on.

Each step scores every unmasked hidden unit by the gradient of
``loss(example) - mean(loss(reference batch))`` with respect to the unit's
incoming weights and bias, zeroes the highest-scoring unit, and stops once the
prediction no longer matches the label.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .data import GroupedDataset, GroupedExample
from .fairdropout import TRAIN
from .metrics import evaluate
from .nn import Model

log = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class NeuronRef:
    layer_index: int
    neuron_index: int


class NeuronMaskSet(frozenset):
    """Set of `NeuronRef` whose activations are forced to zero."""

    def keep_vectors(self, model: Model) -> dict[int, np.ndarray]:
        widths = {l.layer_index: l.out_width for l in model.hidden_layers}
        keep = {}
        for ref in self:
            if ref.layer_index not in widths:
                raise ValueError(f"{ref} is not a hidden unit of this model")
            vec = keep.setdefault(ref.layer_index, np.ones(widths[ref.layer_index], dtype=bool))
            vec[ref.neuron_index] = False
        return keep


def hidden_neurons(model: Model) -> list[NeuronRef]:
    return [NeuronRef(l.layer_index, j) for l in model.hidden_layers for j in range(l.out_width)]


@dataclass
class LocalizationResult:
    example_id: int
    removed: list[NeuronRef]
    flipped: bool
    iterations: int
    reference_batch_ids: list[int]
    # example loss before any removal, then after each removal
    losses: list[float] = field(default_factory=list)

    @property
    def loss_delta(self) -> float:
        return self.losses[-1] - self.losses[0] if self.losses else 0.0


def _as_example(example) -> tuple[np.ndarray, int, int | None]:
    if isinstance(example, GroupedExample):
        return example.features, example.y, example.example_id
    x, y, *rest = example
    return np.asarray(x, dtype=np.float64), int(y), (rest[0] if rest else None)


def _batch_arrays(batch) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    if isinstance(batch, GroupedDataset):
        return batch.features, batch.y, batch.ids
    x, y, *rest = batch
    return np.atleast_2d(np.asarray(x, dtype=np.float64)), np.asarray(y), (rest[0] if rest else None)


def criticality_scores(model: Model, example, reference_batch, mask: Iterable[NeuronRef] = (),
                       mode: str | None = None) -> dict[NeuronRef, float]:
    """Score of every unmasked hidden unit for the current mask."""
    bx, by, bids = _batch_arrays(reference_batch)
    if len(by) == 0:
        raise ValueError("reference batch is empty")
    x, y, eid = _as_example(example)
    mask = NeuronMaskSet(mask)
    keep = mask.keep_vectors(model)
    _, g_ex = model.loss_and_grad(x, [y], None if eid is None else [eid], mode, keep)
    _, g_b = model.loss_and_grad(bx, by, bids, mode, keep)
    diff = g_ex - g_b
    scores = {}
    for layer in model.hidden_layers:
        li = layer.layer_index
        norms = np.sqrt(np.sum(diff.weights[li] ** 2, axis=1) + diff.bias[li] ** 2)
        for j, s in enumerate(norms):
            ref = NeuronRef(li, j)
            if ref not in mask:
                scores[ref] = float(s)
    return scores


def _predict(model, x, eid, mode, mask) -> int:
    keep = NeuronMaskSet(mask).keep_vectors(model)
    return int(model.predict(x, None if eid is None else [eid], mode, keep))


def _loss(model, x, y, eid, mode, mask) -> float:
    keep = NeuronMaskSet(mask).keep_vectors(model)
    return float(model.losses(x, [y], None if eid is None else [eid], mode, keep)[0])


def critical_neurons(model: Model, example, reference_batch, max_iters: int,
                     mode: str | None = None) -> LocalizationResult:
    """Remove the highest-scoring unit until the example is misclassified.

    Ties go to the lowest layer index, then the lowest unit index. An example
    that is already misclassified is reported as flipped after 0 iterations.
    Model parameters are never modified.
    """
    x, y, eid = _as_example(example)
    _, _, bids = _batch_arrays(reference_batch)
    batch_ids = [] if bids is None else [int(i) for i in bids]
    removed: list[NeuronRef] = []
    losses = [_loss(model, x, y, eid, mode, removed)]
    if _predict(model, x, eid, mode, removed) != y:
        return LocalizationResult(eid, removed, True, 0, batch_ids, losses)
    max_iters = min(max_iters, len(hidden_neurons(model)))
    flipped = False
    for _ in range(max_iters):
        scores = criticality_scores(model, (x, y, eid), reference_batch, removed, mode)
        if not scores:
            break
        best = min(scores, key=lambda r: (-scores[r], r.layer_index, r.neuron_index))
        removed.append(best)
        losses.append(_loss(model, x, y, eid, mode, removed))
        if _predict(model, x, eid, mode, removed) != y:
            flipped = True
            break
    return LocalizationResult(eid, removed, flipped, len(removed), batch_ids, losses)


def brute_force_min_flip(model: Model, example, size_limit: int, mode: str | None = None) -> int | None:
    """Smallest number of hidden units whose removal misclassifies the example.

    Exhaustive over subsets of increasing size; ``None`` means no subset of at
    most ``size_limit`` units works.
    """
    units = hidden_neurons(model)
    if len(units) > 16 or size_limit > 4:
        raise ValueError("brute force is limited to 16 hidden units and subsets of size 4")
    x, y, eid = _as_example(example)
    for size in range(size_limit + 1):
        for subset in itertools.combinations(units, size):
            if _predict(model, x, eid, mode, subset) != y:
                return size
    return None


# ----- group-level analysis -----

def minority_group(ds: GroupedDataset) -> tuple[int, int]:
    table = ds.group_table()
    return min(table, key=lambda g: (len(table[g]), g))


def sample_probe_rows(ds: GroupedDataset, n_minority: int, n_majority: int, seed: int,
                      group: tuple[int, int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Rows from the minority group and from all other groups, capped at what exists."""
    rng = np.random.default_rng(seed)
    group = group or minority_group(ds)
    in_group = (ds.y == group[0]) & (ds.a == group[1])
    out = []
    for name, pool, n in (("minority", np.flatnonzero(in_group), n_minority),
                          ("majority", np.flatnonzero(~in_group), n_majority)):
        if n > len(pool):
            log.warning("requested %d %s examples, only %d available", n, name, len(pool))
            n = len(pool)
        out.append(np.sort(rng.choice(pool, size=n, replace=False)))
    return out[0], out[1]


def reference_batch_rows(ds: GroupedDataset, size: int, seed: int, exclude: Iterable[int] = ()) -> np.ndarray:
    pool = np.setdiff1d(np.arange(len(ds)), np.asarray(list(exclude), dtype=np.int64))
    size = min(size, len(pool))
    return np.sort(np.random.default_rng(seed).choice(pool, size=size, replace=False))


@dataclass
class ProbeRow:
    example_id: int
    group_y: int
    group_a: int
    sample: str
    result: LocalizationResult
    train_wga_after_drop: float
    test_wga_after_drop: float


@dataclass
class ProbeReport:
    rows: list[ProbeRow]
    baseline_train_wga: float
    baseline_test_wga: float

    COLUMNS = ("example_id", "group_y", "group_a", "sample", "n_removed", "flipped",
               "train_wga_after_drop", "test_wga_after_drop", "loss_delta", "removed")

    def table(self) -> list[dict]:
        return [{
            "example_id": r.example_id, "group_y": r.group_y, "group_a": r.group_a, "sample": r.sample,
            "n_removed": len(r.result.removed), "flipped": int(r.result.flipped),
            "train_wga_after_drop": r.train_wga_after_drop, "test_wga_after_drop": r.test_wga_after_drop,
            "loss_delta": r.result.loss_delta,
            "removed": ";".join(f"{n.layer_index}:{n.neuron_index}" for n in r.result.removed),
        } for r in self.rows]

    def select(self, sample: str) -> list[ProbeRow]:
        return [r for r in self.rows if r.sample == sample]

    def summary(self) -> dict:
        out = {"baseline_train_wga": self.baseline_train_wga, "baseline_test_wga": self.baseline_test_wga,
               "samples": {}}
        for sample in ("minority", "majority"):
            rows = self.select(sample)
            if not rows:
                continue
            n_removed = np.array([len(r.result.removed) for r in rows], dtype=float)
            d_test = np.array([r.test_wga_after_drop - self.baseline_test_wga for r in rows])
            d_train = np.array([r.train_wga_after_drop - self.baseline_train_wga for r in rows])
            out["samples"][sample] = {
                "count": len(rows),
                "flipped": int(sum(r.result.flipped for r in rows)),
                "n_removed_quartiles": _quartiles(n_removed),
                "train_wga_delta_quartiles": _quartiles(d_train),
                "test_wga_delta_quartiles": _quartiles(d_test),
                "fraction_test_wga_not_worse": float(np.mean(d_test >= 0)),
                "fraction_test_wga_improved": float(np.mean(d_test > 0)),
            }
        return out


def _quartiles(v: np.ndarray) -> dict:
    q = np.percentile(v, [0, 25, 50, 75, 100])
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(x) for x in q)))


def probe_report(model: Model, train_ds: GroupedDataset, test_ds: GroupedDataset,
                 minority_rows, majority_rows, reference_rows, max_iters: int,
                 mode: str = TRAIN) -> ProbeReport:
    """Localize every sampled training example and measure what dropping its units does.

    For each example the removed set is applied to the whole model and the
    worst-group accuracy of the train and test splits is recomputed.
    """
    minority_rows = np.asarray(minority_rows, dtype=np.int64)
    majority_rows = np.asarray(majority_rows, dtype=np.int64)
    if len(minority_rows) == 0:
        raise ValueError("minority sample is empty")
    if len(majority_rows) == 0:
        raise ValueError("majority sample is empty")
    batch = train_ds.subset(reference_rows)
    base_train = evaluate(model, train_ds, mode).worst_group_accuracy
    base_test = evaluate(model, test_ds, mode).worst_group_accuracy
    rows = []
    for sample, idx in (("minority", minority_rows), ("majority", majority_rows)):
        for i in idx:
            ex = train_ds[int(i)]
            res = critical_neurons(model, ex, batch, max_iters, mode)
            if res.removed:
                keep = NeuronMaskSet(res.removed).keep_vectors(model)
                tr = evaluate(model, train_ds, mode, keep).worst_group_accuracy
                te = evaluate(model, test_ds, mode, keep).worst_group_accuracy
            else:
                tr, te = base_train, base_test
            rows.append(ProbeRow(ex.example_id, ex.y, ex.a, sample, res, tr, te))
    return ProbeReport(rows, base_train, base_test)
