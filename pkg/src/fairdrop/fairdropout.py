"""Example-tied dropout.

A FairDropout layer splits the `H` units of the preceding layer into a fixed
prefix of generalizing units, ``[0, gen_count)``, and a pool of memorizing
units, ``[gen_count, H)``. Each training example owns exactly ``k`` pool units,
chosen once from its id. In train mode an example sees the generalizing units
plus its own pool units; in test mode every pool unit is dropped.

Activations are never rescaled in either mode.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ShapeError

TRAIN = "train"
TEST = "test"
MODES = (TRAIN, TEST)

_U64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class FairDropoutConfig:
    width: int
    p_gen: float
    p_mem: float
    allocation_seed: int = 0

    def __post_init__(self):
        if self.width < 1:
            raise ConfigError(f"width must be >= 1, got {self.width}")
        if not 0.0 < self.p_gen <= 1.0:
            raise ConfigError(f"p_gen must be in (0, 1], got {self.p_gen}")
        if not 0.0 <= self.p_mem <= 1.0:
            raise ConfigError(f"p_mem must be in [0, 1], got {self.p_mem}")

    @property
    def gen_count(self) -> int:
        # round() is half-to-even
        return min(self.width, round(self.p_gen * self.width))

    @property
    def pool_size(self) -> int:
        return self.width - self.gen_count

    @property
    def mem_count(self) -> int:
        return round(self.p_mem * self.pool_size)


@dataclass(frozen=True)
class MaskAllocation:
    example_id: int
    mem_indices: tuple[int, ...]


@lru_cache(maxsize=None)
def allocate_mask(config: FairDropoutConfig, example_id: int) -> MaskAllocation:
    """Memorizing units owned by `example_id`.

    Draws ``config.mem_count`` pool units without replacement with a partial
    Fisher-Yates shuffle driven by a Philox stream keyed on
    ``(allocation_seed, example_id)``, so the result does not depend on call
    order or on the process.
    """
    k = config.mem_count
    if k == 0:
        return MaskAllocation(example_id, ())
    key = np.array([config.allocation_seed & _U64, example_id & _U64], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    pool = list(range(config.gen_count, config.width))
    n = len(pool)
    offsets = rng.integers(0, n - np.arange(k)).tolist()
    for i, off in enumerate(offsets):
        j = i + off
        pool[i], pool[j] = pool[j], pool[i]
    return MaskAllocation(example_id, tuple(sorted(pool[:k])))


_TABLES: dict[FairDropoutConfig, np.ndarray] = {}


def mem_index_table(config: FairDropoutConfig, example_ids: np.ndarray) -> np.ndarray:
    """``(len(example_ids), k)`` array of memorizing units, one row per id.

    Rows come from a per-config table of allocations for ids ``0..max_id``,
    extended on demand. Existing rows are never rewritten.
    """
    k = config.mem_count
    ids = np.asarray(example_ids, dtype=np.int64)
    if ids.size and ids.min() < 0:
        return np.array([allocate_mask(config, int(i)).mem_indices for i in ids], dtype=np.intp).reshape(-1, k)
    table = _TABLES.get(config)
    need = int(ids.max()) + 1 if ids.size else 0
    if table is None or len(table) < need:
        start = 0 if table is None else len(table)
        grown = np.empty((-(-need // 1024) * 1024, k), dtype=np.intp)
        if table is not None:
            grown[:start] = table
        for i in range(start, len(grown)):
            grown[i] = allocate_mask(config, i).mem_indices
        _TABLES[config] = table = grown
    return table[ids]


def _check_width(config: FairDropoutConfig, x: np.ndarray) -> None:
    if x.shape[-1] != config.width:
        raise ShapeError("FairDropout input width", config.width, x.shape[-1])


def keep_train_mode(config: FairDropoutConfig, allocation: MaskAllocation) -> np.ndarray:
    keep = np.zeros(config.width, dtype=bool)
    keep[: config.gen_count] = True
    keep[list(allocation.mem_indices)] = True
    return keep


def keep_test_mode(config: FairDropoutConfig) -> np.ndarray:
    keep = np.zeros(config.width, dtype=bool)
    keep[: config.gen_count] = True
    return keep


def forward_train(config: FairDropoutConfig, allocation: MaskAllocation, x: np.ndarray) -> np.ndarray:
    _check_width(config, x)
    return np.where(keep_train_mode(config, allocation), x, 0.0)


def forward_test(config: FairDropoutConfig, x: np.ndarray) -> np.ndarray:
    _check_width(config, x)
    return np.where(keep_test_mode(config), x, 0.0)


def backward_mask(config: FairDropoutConfig, allocation: MaskAllocation | None, mode: str,
                  upstream_grad: np.ndarray) -> np.ndarray:
    _check_width(config, upstream_grad)
    if mode == TRAIN:
        keep = keep_train_mode(config, allocation)
    elif mode == TEST:
        keep = keep_test_mode(config)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return np.where(keep, upstream_grad, 0.0)


class FairDropout:
    """Parameter-free layer wrapper used inside a `Model` stack."""

    kind = "fair_dropout"

    def __init__(self, config: FairDropoutConfig):
        self.config = config

    @property
    def width(self) -> int:
        return self.config.width

    def keep_matrix(self, example_ids, mode: str, n_rows: int) -> np.ndarray:
        """Boolean (n_rows, H) mask; row i belongs to ``example_ids[i]``."""
        cfg = self.config
        if mode == TEST or cfg.mem_count == 0:
            return np.broadcast_to(keep_test_mode(cfg), (n_rows, cfg.width))
        if mode != TRAIN:
            raise ValueError(f"unknown mode {mode!r}")
        if example_ids is None:
            raise ValueError("train-mode FairDropout needs example ids")
        if len(example_ids) != n_rows:
            raise ShapeError("example id count", n_rows, len(example_ids))
        keep = np.zeros((n_rows, cfg.width), dtype=bool)
        keep[:, : cfg.gen_count] = True
        cols = mem_index_table(cfg, np.asarray(example_ids, dtype=np.int64))
        keep[np.arange(n_rows)[:, None], cols] = True
        return keep

    def to_dict(self) -> dict:
        c = self.config
        return {"kind": self.kind, "H": c.width, "p_gen": c.p_gen, "p_mem": c.p_mem,
                "allocation_seed": c.allocation_seed}

    def __repr__(self):
        c = self.config
        return f"FairDropout(H={c.width}, p_gen={c.p_gen}, p_mem={c.p_mem})"
