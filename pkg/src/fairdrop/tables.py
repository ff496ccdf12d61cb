"""Delimited output files and their documented column lists."""

from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path
from typing import Iterable

GROUP_ACC = r"acc_y\d+_a\d+"

# Each entry lists the fixed leading columns, then regexes for the repeated ones.
SCHEMAS: dict[str, dict] = {
    "group_stats.csv": {
        "columns": ["group_y", "group_a", "count", "fraction"],
        "repeated": [],
        "doc": "Training-split group counts and fractions.",
    },
    "history.csv": {
        "columns": ["epoch", "split", "train_loss"],
        "repeated": [rf"(train|test)_mode_(loss|avg|wga|wca|{GROUP_ACC})"],
        "doc": "One row per (epoch, split); metrics in both FairDropout modes.",
    },
    "probe.csv": {
        "columns": ["example_id", "group_y", "group_a", "sample", "n_removed", "flipped",
                    "train_wga_after_drop", "test_wga_after_drop", "loss_delta", "removed"],
        "repeated": [],
        "doc": "One row per probed training example; removed lists layer:unit pairs.",
    },
    "sweep.csv": {
        "columns": ["rank", "index", "p_gen", "p_mem", "learning_rate", "weight_decay", "layer_position",
                    "status", "error", "val_wca", "val_avg", "val_wga", "test_wca", "test_avg", "test_wga",
                    "test_train_mode_wca", "test_train_mode_avg", "test_train_mode_wga"],
        "repeated": [rf"test_{GROUP_ACC}"],
        "doc": "One row per grid point ranked by validation worst-class accuracy (test mode).",
    },
}


def validate_columns(name: str, header: list[str]) -> None:
    schema = SCHEMAS[name]
    fixed = schema["columns"]
    if header[:len(fixed)] != fixed:
        raise ValueError(f"{name}: leading columns {header[:len(fixed)]} != {fixed}")
    for col in header[len(fixed):]:
        if not any(re.fullmatch(p, col) for p in schema["repeated"]):
            raise ValueError(f"{name}: undocumented column {col!r}")


def fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    if v is None:
        return ""
    return str(v)


def write_rows(rows: list[dict], path, columns: list[str] | None = None) -> None:
    """CSV with a stable column order; missing cells are left empty."""
    if columns is None:
        columns = []
        for row in rows:
            columns += [k for k in row if k not in columns]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row.get(c)) for c in columns])


def read_rows(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if hasattr(obj, "item"):
        return obj.item()
    return obj


def floats(rows: Iterable[dict], key: str) -> list[float]:
    return [float(r[key]) if r[key] not in ("", None) else math.nan for r in rows]
