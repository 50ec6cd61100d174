"""Report figures written next to the CSV/JSON outputs (Agg backend, PNG)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_train_log(rows: list[dict], path: str | Path) -> Path:
    """Loss terms (left) and train/test OA (right) per epoch."""
    epochs = [r["epoch"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    skip = {"epoch", "lr", "train_oa", "test_oa"}
    for key in rows[0]:
        if key not in skip:
            ax1.plot(epochs, [r[key] for r in rows], label=key)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend(fontsize=7)
    ax2.plot(epochs, [r["train_oa"] for r in rows], label="train (running)")
    ax2.plot(epochs, [r["test_oa"] for r in rows], label="test")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("OA")
    ax2.set_ylim(0, 1.02)
    ax2.legend(fontsize=7)
    return _save(fig, path)


def plot_similarity(S: np.ndarray, labels, path: str | Path) -> Path:
    """Cosine similarity heatmap with rows grouped by class."""
    labels = np.asarray(labels)
    order = np.argsort(labels, kind="stable")
    fig, ax = plt.subplots(figsize=(4.6, 4))
    im = ax.imshow(S[np.ix_(order, order)], cmap="viridis", vmin=-1, vmax=1)
    fig.colorbar(im, ax=ax, fraction=0.046)
    edges = np.flatnonzero(np.diff(labels[order])) + 0.5
    for e in edges:
        ax.axhline(e, color="w", lw=0.5)
        ax.axvline(e, color="w", lw=0.5)
    ax.set_title("descriptor similarity")
    ax.set_xticks([])
    ax.set_yticks([])
    return _save(fig, path)


def plot_per_class(per_class: list[float], class_names: list[str], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3))
    x = np.arange(len(per_class))
    ax.bar(x, np.nan_to_num(per_class), color="0.4")
    ax.set_xticks(x, class_names[: len(per_class)], rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("accuracy")
    return _save(fig, path)


def plot_bench(stages: dict[str, dict[str, float]], path: str | Path) -> Path:
    """Stacked per-stage seconds per object, one bar per model."""
    names = list(stages)
    keys = list(next(iter(stages.values())))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    bottom = np.zeros(len(names))
    for k in keys:
        vals = np.array([stages[n][k] for n in names]) * 1e3
        ax.bar(names, vals, bottom=bottom, label=k)
        bottom += vals
    ax.set_ylabel("ms per object")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_sweep(rows: list[dict], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    x = np.arange(len(rows))
    ax.bar(x, [r["best_test_oa"] for r in rows], color="0.4")
    ax.set_xticks(x, [r["added"] for r in rows], rotation=30, ha="right", fontsize=8)
    lo = min(r["best_test_oa"] for r in rows)
    ax.set_ylim(max(0.0, lo - 0.1), 1.0)
    ax.set_ylabel("best test OA")
    ax.set_xlabel("cumulative target added")
    return _save(fig, path)
