"""Experiment configuration and the runs behind each CLI command.

One top-level seed is split into named streams: ``data`` seeds the synthetic
generator, ``init`` the weights, ``shuffle`` the mini-batch order,
``allocation`` the FairDropout masks and ``probe`` the probe sampling.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import GroupedDataset, SyntheticSpec, celeba_like_spec, generate, load_csv
from .errors import ConfigError
from .fairdropout import MODES, TRAIN
from .memprobe import ProbeReport, hidden_neurons, probe_report, reference_batch_rows, sample_probe_rows
from .nn import Model, build_mlp
from .seeding import derive_seed
from .trainer import TrainConfig, expand_grid, sweep, train

log = logging.getLogger(__name__)


@dataclass
class FairDropoutSettings:
    position: int | str = 0
    p_gen: float = 0.2
    p_mem: float = 0.2


@dataclass
class ProbeSettings:
    n_minority: int = 100
    n_majority: int = 100
    batch_size: int = 64
    max_iters: int | None = None  # default: every hidden unit
    mode: str = TRAIN

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"probe mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1:
            raise ConfigError("probe batch_size must be >= 1")


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one run.

    ``data`` is either a synthetic spec (dict) or ``{"csv_dir": path}`` holding
    ``train.csv``, ``val.csv`` and ``test.csv``. When ``data`` is omitted the
    CelebA-like synthetic regime is used.
    """

    seed: int = 0
    data: dict | None = None
    hidden: list[int] = field(default_factory=lambda: [256])
    fair_dropout: FairDropoutSettings | None = None
    projection_width: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    class_reweight: bool = False
    probe: ProbeSettings = field(default_factory=ProbeSettings)
    grid: dict | list | None = None

    def __post_init__(self):
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("hidden must list at least one positive width")
        fd = self.fair_dropout
        if fd is not None:
            if isinstance(fd.position, int) and not 0 <= fd.position < len(self.hidden):
                raise ConfigError(f"fair_dropout.position {fd.position} is not a hidden block "
                                  f"(0..{len(self.hidden) - 1}) or 'proj'")
            if not isinstance(fd.position, int) and fd.position != "proj":
                raise ConfigError(f"fair_dropout.position must be an int or 'proj', got {fd.position!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        try:
            if d.get("fair_dropout") is not None:
                d["fair_dropout"] = FairDropoutSettings(**d["fair_dropout"])
            if "train" in d:
                d["train"] = TrainConfig(**d["train"])
            if "probe" in d:
                d["probe"] = ProbeSettings(**d["probe"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = self.to_dict()
        d["seed"] = seed
        return ExperimentConfig.from_dict(d)

    # ----- derived pieces -----

    def subseed(self, stream: str) -> int:
        return derive_seed(self.seed, stream)

    def train_config(self, **overrides) -> TrainConfig:
        d = asdict(self.train)
        d["seed"] = self.subseed("shuffle")
        d.update(overrides)
        return TrainConfig(**d)

    def synthetic_spec(self) -> SyntheticSpec | None:
        if self.data is not None and "csv_dir" in self.data:
            return None
        spec = celeba_like_spec() if self.data is None else SyntheticSpec.from_dict(self.data)
        spec.seed = self.subseed("data")
        return spec

    def build_model(self, in_width: int, n_classes: int, point: dict | None = None) -> Model:
        """Model for this config; ``point`` overrides FairDropout settings from a sweep grid."""
        point = point or {}
        fd = self.fair_dropout
        fd_args = None
        if fd is not None or point.get("p_gen") is not None:
            base = fd or FairDropoutSettings()
            position = point.get("layer_position")
            fd_args = (base.position if position is None else position,
                       base.p_gen if point.get("p_gen") is None else point["p_gen"],
                       base.p_mem if point.get("p_mem") is None else point["p_mem"],
                       self.subseed("allocation"))
        try:
            return build_mlp(in_width, self.hidden, n_classes, self.subseed("init"), fd_args,
                             self.projection_width)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def load_splits(cfg: ExperimentConfig) -> tuple[GroupedDataset, GroupedDataset, GroupedDataset]:
    spec = cfg.synthetic_spec()
    if spec is not None:
        return generate(spec)
    root = Path(cfg.data["csv_dir"])
    train = load_csv(root / "train.csv", "train")
    shape = dict(n_classes=train.n_classes, n_attributes=train.n_attributes)
    return train, load_csv(root / "val.csv", "val", **shape), load_csv(root / "test.csv", "test", **shape)


def run_training(cfg: ExperimentConfig, splits=None, epochs: int | None = None):
    """Build, train and return ``(model, history, splits)``."""
    train_ds, val, test = splits or load_splits(cfg)
    model = cfg.build_model(train_ds.feature_dim, train_ds.n_classes)
    tc = cfg.train_config() if epochs is None else cfg.train_config(epochs=epochs)
    _, history = train(model, train_ds, tc, cfg.class_reweight,
                       eval_sets={"train": train_ds, "val": val, "test": test})
    return model, history, (train_ds, val, test)


def run_probe(cfg: ExperimentConfig, model: Model, train_ds: GroupedDataset, test_ds: GroupedDataset) -> ProbeReport:
    if model.in_width != train_ds.feature_dim:
        raise ConfigError(f"checkpoint expects {model.in_width} features, dataset has {train_ds.feature_dim}")
    if model.n_classes < train_ds.n_classes:
        raise ConfigError(f"checkpoint has {model.n_classes} outputs, dataset has {train_ds.n_classes} classes")
    ps = cfg.probe
    seed = cfg.subseed("probe")
    minority, majority = sample_probe_rows(train_ds, ps.n_minority, ps.n_majority, seed)
    ref = reference_batch_rows(train_ds, ps.batch_size, derive_seed(cfg.seed, "probe.batch"),
                               exclude=np.concatenate([minority, majority]))
    max_iters = ps.max_iters if ps.max_iters is not None else len(hidden_neurons(model))
    mode = ps.mode if model.fair_dropouts else None
    return probe_report(model, train_ds, test_ds, minority, majority, ref, max_iters, mode)


def grid_points(grid) -> list[dict]:
    if grid is None:
        raise ConfigError("no sweep grid given")
    if isinstance(grid, dict):
        return expand_grid(grid)
    return list(grid)


def run_sweep(cfg: ExperimentConfig, grid, splits=None):
    train_ds, val, test = splits or load_splits(cfg)
    return sweep(grid_points(grid), train_ds, val, test, cfg.train_config(),
                 lambda point: cfg.build_model(train_ds.feature_dim, train_ds.n_classes, point))
