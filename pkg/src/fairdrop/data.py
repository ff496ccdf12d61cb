"""Synthetic group-structured datasets, CSV I/O and group bookkeeping."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataFormatError

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class GroupedExample:
    example_id: int
    features: np.ndarray
    y: int
    a: int

    @property
    def group(self) -> tuple[int, int]:
        return (self.y, self.a)


@dataclass
class GroupSpec:
    classes: int
    attributes: int
    group_fractions: dict[tuple[int, int], float]
    total_count: int

    def __post_init__(self):
        self.group_fractions = {(int(y), int(a)): float(f) for (y, a), f in self.group_fractions.items()}
        if self.classes < 1 or self.attributes < 1:
            raise ConfigError("classes and attributes must be >= 1")
        for (y, a), f in self.group_fractions.items():
            if not (0 <= y < self.classes and 0 <= a < self.attributes):
                raise ConfigError(f"group ({y},{a}) outside {self.classes}x{self.attributes}")
            if f < 0:
                raise ConfigError(f"group ({y},{a}) has negative fraction {f}")
        total = sum(self.group_fractions.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"group fractions sum to {total!r}, not 1")

    @property
    def groups(self) -> list[tuple[int, int]]:
        return [(y, a) for y in range(self.classes) for a in range(self.attributes)]

    def fractions(self) -> dict[tuple[int, int], float]:
        return {g: self.group_fractions.get(g, 0.0) for g in self.groups}

    def counts(self) -> dict[tuple[int, int], int]:
        return apportion(self.fractions(), self.total_count)

    @classmethod
    def balanced(cls, classes: int, attributes: int, total_count: int) -> "GroupSpec":
        f = 1.0 / (classes * attributes)
        return cls(classes, attributes, {(y, a): f for y in range(classes) for a in range(attributes)},
                   total_count)


def apportion(fractions: dict, total: int) -> dict:
    """Largest-remainder apportionment of `total` items; ties go to the earlier key."""
    keys = list(fractions)
    quotas = [fractions[k] * total for k in keys]
    counts = [math.floor(q + 1e-9) for q in quotas]
    left = total - sum(counts)
    order = sorted(range(len(keys)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:max(left, 0)]:
        counts[i] += 1
    return dict(zip(keys, counts))


@dataclass
class SyntheticSpec:
    group_spec: GroupSpec
    core_dim: int = 2
    spurious_dim: int = 2
    noise_dim: int = 0
    core_separation: float = 1.0
    spurious_separation: float = 1.0
    noise_std: float = 1.0
    seed: int = 0
    val_count: int | None = None
    test_count: int | None = None

    def __post_init__(self):
        if min(self.core_dim, self.spurious_dim, self.noise_dim) < 0:
            raise ConfigError("block dimensions must be >= 0")
        if self.feature_dim < 1:
            raise ConfigError("feature vector would be empty")
        if self.core_separation < 0 or self.spurious_separation < 0:
            raise ConfigError("separations must be >= 0")
        if self.noise_std <= 0:
            raise ConfigError("noise_std must be > 0")

    @property
    def feature_dim(self) -> int:
        return self.core_dim + self.spurious_dim + self.noise_dim

    def split_count(self, split: str) -> int:
        if split == "train":
            return self.group_spec.total_count
        n = self.val_count if split == "val" else self.test_count
        return self.group_spec.total_count // 5 if n is None else n

    def to_dict(self) -> dict:
        gs = self.group_spec
        return {
            "group_spec": {
                "classes": gs.classes, "attributes": gs.attributes, "total_count": gs.total_count,
                "group_fractions": [{"y": y, "a": a, "fraction": f} for (y, a), f in gs.group_fractions.items()],
            },
            "core_dim": self.core_dim, "spurious_dim": self.spurious_dim, "noise_dim": self.noise_dim,
            "core_separation": self.core_separation, "spurious_separation": self.spurious_separation,
            "noise_std": self.noise_std, "seed": self.seed,
            "val_count": self.val_count, "test_count": self.test_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        gs = d.pop("group_spec")
        fr = gs["group_fractions"]
        if isinstance(fr, dict):
            fractions = {tuple(int(v) for v in k.split(",")): f for k, f in fr.items()}
        else:
            fractions = {(e["y"], e["a"]): e["fraction"] for e in fr}
        group_spec = GroupSpec(int(gs["classes"]), int(gs["attributes"]), fractions, int(gs["total_count"]))
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(group_spec=group_spec, **d)

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


CELEBA_LIKE_FRACTIONS = {(0, 0): 0.440, (0, 1): 0.409, (1, 0): 0.142, (1, 1): 0.009}


def celeba_like_spec(total_count: int = 20000, seed: int = 0, **kwargs) -> SyntheticSpec:
    """Two classes, two attributes, minority group (1, 1) at 0.9% of train."""
    # a weak core signal, a strong spurious one and enough noise dimensions
    # for an MLP to memorize the 0.9% minority group
    defaults = dict(core_dim=2, spurious_dim=2, noise_dim=100, core_separation=0.7,
                    spurious_separation=2.0, noise_std=1.0)
    defaults.update(kwargs)
    return SyntheticSpec(GroupSpec(2, 2, dict(CELEBA_LIKE_FRACTIONS), total_count), seed=seed, **defaults)


@dataclass
class GroupedDataset:
    """Feature matrix plus labels, attributes and stable example ids.

    Ids are ``0..N-1`` in the stored (canonical) order.
    """

    features: np.ndarray
    y: np.ndarray
    a: np.ndarray
    split: str = "train"
    n_classes: int | None = None
    n_attributes: int | None = None
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.a = np.asarray(self.a, dtype=np.int64)
        n = len(self.y)
        if self.features.ndim != 2 or self.features.shape[0] != n or len(self.a) != n:
            raise DataFormatError("features, y and a must have the same number of rows")
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.n_classes is None:
            self.n_classes = int(self.y.max()) + 1 if n else 0
        if self.n_attributes is None:
            self.n_attributes = int(self.a.max()) + 1 if n else 0

    def __len__(self) -> int:
        return len(self.y)

    def __iter__(self) -> Iterator[GroupedExample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> GroupedExample:
        return GroupedExample(int(self.ids[i]), self.features[i], int(self.y[i]), int(self.a[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, GroupedDataset):
            return NotImplemented
        return (self.split == other.split and self.n_classes == other.n_classes
                and self.n_attributes == other.n_attributes
                and np.array_equal(self.ids, other.ids) and np.array_equal(self.y, other.y)
                and np.array_equal(self.a, other.a) and np.array_equal(self.features, other.features))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def group_ids(self) -> np.ndarray:
        """Flat group code ``y * n_attributes + a`` per row."""
        return self.y * self.n_attributes + self.a

    @property
    def groups(self) -> list[tuple[int, int]]:
        return [(y, a) for y in range(self.n_classes) for a in range(self.n_attributes)]

    def group_table(self) -> dict[tuple[int, int], np.ndarray]:
        """Row indices of each group present in the data."""
        table = {}
        for g in self.groups:
            rows = np.flatnonzero((self.y == g[0]) & (self.a == g[1]))
            if len(rows):
                table[g] = rows
        return table

    def subset(self, rows) -> "GroupedDataset":
        """Rows keep their original ids."""
        rows = np.asarray(rows, dtype=np.int64)
        return GroupedDataset(self.features[rows], self.y[rows], self.a[rows], self.split,
                              self.n_classes, self.n_attributes, self.ids[rows])


def _level(v: int, n: int) -> float:
    return 0.0 if n < 2 else 2.0 * v / (n - 1) - 1.0


def _sample_split(spec: SyntheticSpec, counts: dict, rng: np.random.Generator, split: str) -> GroupedDataset:
    gs = spec.group_spec
    empty = [g for g, c in counts.items() if c < 1]
    if empty:
        raise ConfigError(f"{split} split has empty groups {empty}; increase the example count")
    ys, as_ = [], []
    for (y, a), c in counts.items():
        ys += [y] * c
        as_ += [a] * c
    order = rng.permutation(len(ys))
    y = np.asarray(ys, dtype=np.int64)[order]
    a = np.asarray(as_, dtype=np.int64)[order]
    n = len(y)
    core_mean = spec.core_separation * np.array([_level(v, gs.classes) for v in y])
    spur_mean = spec.spurious_separation * np.array([_level(v, gs.attributes) for v in a])
    means = np.concatenate([
        np.repeat(core_mean[:, None], spec.core_dim, axis=1),
        np.repeat(spur_mean[:, None], spec.spurious_dim, axis=1),
        np.zeros((n, spec.noise_dim)),
    ], axis=1)
    x = means + spec.noise_std * rng.standard_normal((n, spec.feature_dim))
    return GroupedDataset(x, y, a, split, gs.classes, gs.attributes)


def generate(spec: SyntheticSpec) -> tuple[GroupedDataset, GroupedDataset, GroupedDataset]:
    """Train split follows the configured group fractions; val and test are group-balanced."""
    gs = spec.group_spec
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3)]
    out = []
    for split, rng in zip(SPLITS, rngs):
        n = spec.split_count(split)
        if split == "train":
            counts = gs.counts()
        else:
            counts = GroupSpec.balanced(gs.classes, gs.attributes, n).counts()
        out.append(_sample_split(spec, counts, rng, split))
    return tuple(out)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_csv(ds: GroupedDataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "y", "a"] + [f"f{i}" for i in range(ds.feature_dim)])
        for i in range(len(ds)):
            w.writerow([int(ds.ids[i]), int(ds.y[i]), int(ds.a[i])] + [_fmt(v) for v in ds.features[i]])


def load_csv(path, split: str | None = None, n_classes: int | None = None,
             n_attributes: int | None = None) -> GroupedDataset:
    """Read a dataset CSV with header ``id,y,a,f0..f{d-1}``."""
    path = Path(path)
    if split is None:
        split = next((s for s in SPLITS if s in path.stem), "train")
    with path.open(newline="") as fh:
        rows = csv.reader(fh)
        try:
            header = next(rows)
        except StopIteration:
            raise DataFormatError("empty file", line=1) from None
        for j, name in enumerate(("id", "y", "a")):
            if len(header) <= j or header[j] != name:
                raise DataFormatError(f"missing column {name!r}", line=1)
        d = len(header) - 3
        expected = [f"f{i}" for i in range(d)]
        if header[3:] != expected:
            raise DataFormatError(f"feature columns must be f0..f{d - 1}, got {header[3:]}", line=1)
        ids, ys, as_, feats = [], [], [], []
        seen: dict[int, int] = {}
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            try:
                eid, y, a = int(row[0]), int(row[1]), int(row[2])
            except ValueError:
                raise DataFormatError(f"non-integer id/y/a in {row[:3]}", line=lineno) from None
            try:
                f = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise DataFormatError(f"non-numeric feature: {exc}", line=lineno) from None
            if not all(math.isfinite(v) for v in f):
                raise DataFormatError("non-finite feature", line=lineno)
            if y < 0 or a < 0:
                raise DataFormatError("negative label or attribute", line=lineno)
            if eid in seen:
                raise DataFormatError(f"duplicate id {eid} (first seen on line {seen[eid]})", line=lineno)
            seen[eid] = lineno
            ids.append(eid)
            ys.append(y)
            as_.append(a)
            feats.append(f)
    if not ids:
        raise DataFormatError("no data rows", line=2)
    if sorted(ids) != list(range(len(ids))):
        missing = sorted(set(range(len(ids))) - set(ids))
        raise DataFormatError(f"ids are not dense 0..{len(ids) - 1}; missing {missing[:5]}")
    order = np.argsort(ids)
    return GroupedDataset(np.asarray(feats, dtype=np.float64).reshape(len(ids), d)[order],
                          np.asarray(ys)[order], np.asarray(as_)[order], split, n_classes, n_attributes,
                          np.asarray(ids)[order])


@dataclass(frozen=True)
class GroupStat:
    y: int
    a: int
    count: int
    fraction: float


def group_stats(ds: GroupedDataset) -> list[GroupStat]:
    if len(ds) == 0:
        raise ValueError("group_stats needs a nonempty dataset")
    n = len(ds)
    return [GroupStat(y, a, len(rows), len(rows) / n) for (y, a), rows in ds.group_table().items()]


def write_group_stats(stats: list[GroupStat], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group_y", "group_a", "count", "fraction"])
        for s in stats:
            w.writerow([s.y, s.a, s.count, repr(s.fraction)])
