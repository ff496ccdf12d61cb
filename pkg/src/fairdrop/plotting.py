"""Figures rendered from the CSV outputs of train, probe and sweep runs."""

from __future__ import annotations

import re

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .tables import floats  # noqa: E402

# no timestamps or version strings, so reruns give identical files
PNG_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=PNG_META)
    plt.close(fig)


def accuracy_curves(history_rows: list[dict], path, splits=("train", "test")) -> None:
    """Per-group accuracy against epoch; solid lines test mode, dashed lines train mode."""
    splits = [s for s in splits if any(r["split"] == s for r in history_rows)]
    if not splits:
        raise ValueError("history has none of the requested splits")
    fig, axes = plt.subplots(1, len(splits), figsize=(5 * len(splits), 3.6), sharey=True, squeeze=False)
    cols = [c for c in history_rows[0] if re.fullmatch(r"test_mode_acc_y\d+_a\d+", c)]
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for ax, split in zip(axes[0], splits):
        rows = [r for r in history_rows if r["split"] == split]
        epochs = [int(r["epoch"]) for r in rows]
        for i, col in enumerate(cols):
            group = col[len("test_mode_acc_"):]
            color = colors[i % len(colors)]
            ax.plot(epochs, floats(rows, col), color=color, label=f"{group} test mode")
            ax.plot(epochs, floats(rows, "train_mode_" + col[len("test_mode_"):]), color=color, ls="--",
                    label=f"{group} train mode")
        ax.set_title(f"{split} split")
        ax.set_xlabel("epoch")
        ax.set_ylim(-0.02, 1.02)
    axes[0][0].set_ylabel("group accuracy")
    axes[0][-1].legend(fontsize=7, loc="lower right", ncol=2)
    _save(fig, path)


def removal_counts(probe_rows: list[dict], path) -> None:
    """Distribution of how many units had to be removed to flip each example."""
    fig, ax = plt.subplots(figsize=(4.5, 3.6))
    samples = [s for s in ("minority", "majority") if any(r["sample"] == s for r in probe_rows)]
    data = [[int(r["n_removed"]) for r in probe_rows if r["sample"] == s] for s in samples]
    ax.boxplot(data)
    ax.set_xticks(range(1, len(samples) + 1), samples)
    ax.set_ylabel("units removed")
    _save(fig, path)


def wga_after_drop(probe_rows: list[dict], baseline_train: float, baseline_test: float, path) -> None:
    """Change in train and test worst-group accuracy when an example's units are masked."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6), sharey=True)
    for ax, key, base, title in ((axes[0], "train_wga_after_drop", baseline_train, "train split"),
                                 (axes[1], "test_wga_after_drop", baseline_test, "test split")):
        for sample in ("minority", "majority"):
            vals = [v - base for v in floats([r for r in probe_rows if r["sample"] == sample], key)]
            if vals:
                ax.hist(vals, bins=20, alpha=0.6, label=sample)
        ax.axvline(0.0, color="k", lw=0.8)
        ax.set_title(title)
        ax.set_xlabel("worst-group accuracy change")
    axes[0].set_ylabel("examples")
    axes[1].legend(fontsize=8)
    _save(fig, path)


def sweep_modes(sweep_rows: list[dict], path, top: int = 20) -> None:
    """Test worst-group accuracy in both modes for the best-ranked grid points."""
    rows = [r for r in sweep_rows if r["status"] == "ok"][:top]
    if not rows:
        raise ValueError("sweep has no successful rows")
    fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(rows) + 1.5), 3.6))
    x = range(len(rows))
    ax.bar([i - 0.2 for i in x], floats(rows, "test_wga"), 0.4, label="test mode")
    ax.bar([i + 0.2 for i in x], floats(rows, "test_train_mode_wga"), 0.4, label="train mode")
    labels = []
    for r in rows:
        parts = [f"{k}={r[k]}" for k in ("p_gen", "p_mem") if r.get(k) not in ("", None)]
        labels.append("\n".join(parts) or f"#{r['index']}")
    ax.set_xticks(list(x), labels, fontsize=6)
    ax.set_ylabel("test worst-group accuracy")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    _save(fig, path)
