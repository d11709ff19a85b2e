"""Static figures (SVG) for reports and timelines.

Figures are written with a fixed hash salt and no date stamp, so the same
data always produces the same file.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import EvalReport  # noqa: E402

plt.rcParams["svg.hashsalt"] = "vrsniff"
plt.rcParams["svg.fonttype"] = "path"


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format=path.suffix.lstrip(".") or "svg", metadata={"Date": None} if path.suffix == ".svg" else None,
                bbox_inches="tight")
    plt.close(fig)
    return path


def plot_confusion(report: EvalReport, path: str | Path, title: str = "") -> Path:
    cm = report.confusion_matrix
    rows = cm.sum(axis=1, keepdims=True)
    frac = np.divide(cm, rows, out=np.zeros(cm.shape), where=rows > 0)
    n = len(report.labels)
    fig, ax = plt.subplots(figsize=(1.0 + 0.55 * n, 0.8 + 0.5 * n))
    im = ax.imshow(frac, cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(n), report.labels, rotation=60, ha="right", fontsize=8)
    ax.set_yticks(range(n), report.labels, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(n):
        for j in range(n):
            if cm[i, j]:
                ax.text(j, i, str(cm[i, j]), ha="center", va="center", fontsize=7,
                        color="white" if frac[i, j] > 0.5 else "black")
    fig.colorbar(im, ax=ax, fraction=0.046, label="row share")
    ax.set_title(title or f"accuracy {100 * report.accuracy:.1f}%")
    return _save(fig, path)


def plot_ablation(fractions_pct: Sequence[float], accuracy: Sequence[float], precision: Sequence[float],
                  recall: Sequence[float], path: str | Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for values, name, marker in ((accuracy, "accuracy", "o"), (precision, "precision", "s"), (recall, "recall", "^")):
        ax.plot(fractions_pct, values, marker=marker, label=name)
    ax.set_xlabel("training data used (%)")
    ax.set_ylabel("%")
    ax.set_xticks(list(fractions_pct))
    ax.grid(alpha=0.3)
    ax.legend()
    ax.set_title(title)
    return _save(fig, path)


def plot_activity_counts(counts: Sequence[int], accuracy_pct: Sequence[float], infer_s: Sequence[float],
                         path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(counts, accuracy_pct, color="tab:blue", alpha=0.7)
    ax.set_xlabel("activities per app")
    ax.set_ylabel("mean accuracy (%)")
    ax.set_ylim(0, 100)
    ax2 = ax.twinx()
    ax2.plot(counts, infer_s, color="tab:red", marker="o")
    ax2.set_ylabel("mean inference time (s)", color="tab:red")
    return _save(fig, path)


def plot_timeline(timeline, path: str | Path, truth: Sequence[tuple[float, float, str]] | None = None,
                  title: str = "") -> Path:
    """Step plot of the predicted label against time, with ground truth underneath when given."""
    labels = sorted({s.label for s in timeline.segments} | ({lab for _, _, lab in truth} if truth else set()))
    level = {lab: i for i, lab in enumerate(labels)}
    fig, ax = plt.subplots(figsize=(8, 1.2 + 0.35 * len(labels)))
    if truth:
        for start, end, lab in truth:
            ax.plot([start, end], [level[lab]] * 2, color="0.75", linewidth=8, solid_capstyle="butt")
    xs, ys = [], []
    for s in timeline.segments:
        xs += [s.start_s, s.end_s]
        ys += [level[s.label]] * 2
    ax.plot(xs, ys, color="tab:blue", linewidth=1.8, label="predicted")
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("time (s)")
    ax.set_ylim(-0.7, len(labels) - 0.3)
    ax.grid(axis="x", alpha=0.3)
    if title:
        ax.set_title(title)
    return _save(fig, path)
