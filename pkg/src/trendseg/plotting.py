"""Figures written next to the CSV reports.

Uses the non-interactive Agg backend; PNG metadata is stripped so reruns are
byte-identical.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PRICE_LABELS = ("Open", "Low", "High", "Close")

_RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "trendseg",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_accuracy_map(report, path, title: str | None = None) -> Path:
    """Heatmap of per-pixel test accuracy, days down the vertical axis."""
    amap = np.asarray(report.accuracy_map)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(3.2, 0.18 * amap.shape[0] + 1.2))
        im = ax.imshow(amap, cmap="viridis", vmin=0.0, vmax=1.0, aspect="auto")
        ax.set_xticks(range(4), PRICE_LABELS)
        days = np.arange(amap.shape[0])
        ax.set_yticks(days[::max(1, len(days) // 10)], days[::max(1, len(days) // 10)] + 1)
        ax.set_ylabel("output day")
        ax.set_title(title or "per-pixel accuracy")
        fig.colorbar(im, ax=ax, fraction=0.08)
        return _save(fig, path)


def plot_per_day(report, path) -> Path:
    """Accuracy and AUC against output day."""
    days = [r["day"] for r in report.per_day]
    acc = [r["accuracy"] for r in report.per_day]
    auc = [np.nan if r["auc"] is None else r["auc"] for r in report.per_day]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        ax.plot(days, acc, marker="o", ms=3, label="accuracy")
        ax.plot(days, auc, marker="s", ms=3, label="AUC")
        ax.axhline(0.5, color="0.6", lw=0.8, ls="--")
        ax.set_xlabel("output day")
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_history(history, path) -> Path:
    epochs = np.arange(1, len(history) + 1)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        ax.plot(epochs, history.train_loss, label="train loss")
        ax.plot(epochs, history.val_loss, label="val loss")
        if history.best_epoch >= 0:
            ax.axvline(history.best_epoch + 1, color="0.6", lw=0.8, ls="--")
        ax.set_xlabel("epoch")
        ax.set_ylabel("BCE")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_sweep(rows: Sequence[dict], days: Sequence[int], path) -> Path:
    """Accuracy versus number of input frames, one line per picked day plus overall."""
    frames = [r["frames"] for r in rows]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        ax.plot(frames, [r["accuracy"] for r in rows], marker="o", ms=3, color="k", label="overall")
        for d in days:
            ax.plot(frames, [r[f"day{d}_accuracy"] for r in rows], marker=".", label=f"day {d}")
        ax.set_xlabel("input frames")
        ax.set_ylabel("accuracy")
        ax.set_xticks(frames)
        ax.legend(frameon=False, ncol=2)
        return _save(fig, path)
