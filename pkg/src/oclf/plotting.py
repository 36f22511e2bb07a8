"""Static PNG figures: accuracy curves, weight-sweep bars, confusion matrices."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="png")
    plt.close(fig)
    return path


def plot_histories(histories: Mapping[str, object], path, title: str = "Accuracy per epoch") -> Path:
    """Overlay train (solid) and validation (dashed) accuracy for each named history.

    Returns the PNG path. Histories without validation values draw one line.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.6))
        colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
        for i, (name, h) in enumerate(histories.items()):
            c = colors[i % len(colors)]
            epochs = range(1, len(h.train_acc) + 1)
            ax.plot(epochs, h.train_acc, color=c, label=f"{name} train")
            val = [v for v in h.val_acc if v is not None]
            if len(val) == len(h.val_acc):
                ax.plot(epochs, val, color=c, linestyle="--", label=f"{name} validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("accuracy (%)")
        ax.set_ylim(0, 101)
        ax.set_title(title)
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_sweep(rows: Sequence[dict], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.4))
        labels = [r["weights"] for r in rows]
        x = range(len(rows))
        width = 0.27
        for j, (col, name) in enumerate((("total", "vote"), ("concatenate", "concat"), ("final", "final"))):
            ax.bar([i + (j - 1) * width for i in x], [r[col] for r in rows], width, label=name)
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels, rotation=20, ha="right")
        ax.set_ylabel("accuracy (%)")
        ax.set_ylim(0, 101)
        ax.set_title("Patch weight sweep")
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_confusion(cm, path) -> Path:
    rows = cm.as_rows()
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3))
        ax.imshow(rows, cmap="Blues")
        for i in range(2):
            for j in range(2):
                ax.text(j, i, str(rows[i][j]), ha="center", va="center")
        ax.set_xticks([0, 1])
        ax.set_xticklabels(["real", "fake"])
        ax.set_yticks([0, 1])
        ax.set_yticklabels(["real", "fake"])
        ax.set_xlabel("predicted")
        ax.set_ylabel("actual")
        return _save(fig, path)
