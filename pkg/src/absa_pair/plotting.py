"""Figures written next to the CSV/Markdown reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .corpus import POLARITIES  # noqa: E402
from .evaluation import EvalReport  # noqa: E402
from .training import TrainHistory  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
# no Software/date chunks, so equal figures give equal bytes
_SAVE_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=_SAVE_META)
    plt.close(fig)
    return path


def plot_history(history: TrainHistory, path: str | Path, title: str = "") -> Path:
    epochs = [r.epoch for r in history.epochs]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(7, 2.8))
        ax_loss.plot(epochs, [r.mean_loss for r in history.epochs], marker="o", ms=3)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("mean cross-entropy")
        ax_acc.plot(epochs, [r.train_accuracy for r in history.epochs], marker="o", ms=3, label="train")
        evals = [r.eval_accuracy for r in history.epochs]
        if any(e is not None for e in evals):
            ax_acc.plot(epochs, [np.nan if e is None else e for e in evals], marker="s", ms=3, label="held-out")
            ax_acc.legend(frameon=False)
        ax_acc.set_xlabel("epoch")
        ax_acc.set_ylabel("example accuracy")
        ax_acc.set_ylim(-0.02, 1.02)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_confusion(report: EvalReport, path: str | Path) -> Path:
    names = [p.value for p in POLARITIES]
    cm = np.asarray(report.confusion)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 3.0))
        im = ax.imshow(cm, cmap="Blues", vmin=0)
        ax.set_xticks(range(len(names)), names)
        ax.set_yticks(range(len(names)), names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("gold")
        threshold = cm.max() / 2 if cm.size and cm.max() else 0
        for i in range(cm.shape[0]):
            for j in range(cm.shape[1]):
                ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                        color="white" if cm[i, j] > threshold else "black")
        ax.set_title(report.label)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        fig.tight_layout()
        return _save(fig, path)


def plot_comparison(reports: Sequence[EvalReport], path: str | Path) -> Path:
    """Horizontal bars of accuracy and macro-F1 (percent), best model on top."""
    ordered = sorted(reports, key=lambda r: -r.accuracy)
    labels = [r.label for r in ordered][::-1]
    acc = [100 * r.accuracy for r in ordered][::-1]
    f1 = [100 * r.macro_f1 for r in ordered][::-1]
    y = np.arange(len(labels))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 0.5 + 0.45 * len(labels)))
        ax.barh(y + 0.2, acc, height=0.4, label="accuracy")
        ax.barh(y - 0.2, f1, height=0.4, label="macro-F1")
        ax.set_yticks(y, labels)
        ax.set_xlim(0, 100)
        ax.set_xlabel("percent")
        ax.legend(frameon=False, loc="lower right")
        fig.tight_layout()
        return _save(fig, path)
