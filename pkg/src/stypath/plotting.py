"""Figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from stypath.evaluation import FilterCurve, SaturationSweep, aggregate_curves  # noqa: E402


def _save(fig, path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-stable
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return str(path)


def plot_saturation(sweep: SaturationSweep, path, title: str = "Accuracy vs. style-transfer samples") -> str:
    ns = [p.n_per_class for p in sweep.points]
    mean = np.array([p.mean_accuracy for p in sweep.points])
    std = np.array([p.std_accuracy for p in sweep.points])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for f in range(sweep.k):
        ax.plot(ns, [p.per_fold[f] for p in sweep.points], color="0.7", lw=0.8, marker=".")
    ax.errorbar(ns, mean, yerr=std, color="C0", marker="o", capsize=3, label="mean ± std over folds")
    ax.set_xlabel("style-transfer samples per class")
    ax.set_ylabel("balanced accuracy")
    ax.set_title(title)
    ax.legend(loc="lower right")
    return _save(fig, path)


def plot_filter_curves(curves: dict[str, Sequence[FilterCurve]], path,
                       title: str = "Accuracy vs. retained samples") -> str:
    """One panel per condition: per-fold lines plus the mean ± std band."""
    fig, axes = plt.subplots(1, len(curves), figsize=(4.2 * len(curves), 3.5), squeeze=False, sharey=True)
    for ax, (name, folds) in zip(axes[0], curves.items()):
        for c in folds:
            ax.plot([p.level * 100 for p in c.points], [p.accuracy for p in c.points], color="0.7", lw=0.8)
        agg = aggregate_curves(folds)
        x = np.array(agg["levels"]) * 100
        m, s = np.array(agg["mean"]), np.array(agg["std"])
        ax.plot(x, m, color="C1", lw=2, label="mean")
        ax.fill_between(x, np.clip(m - s, 0, 1), np.clip(m + s, 0, 1), color="C1", alpha=0.25, label="± std")
        ax.set_ylim(0, 1.02)
        ax.set_xlim(100, 0)
        ax.set_xlabel("retained samples (%)")
        ax.set_title(name)
    axes[0][0].set_ylabel("balanced accuracy")
    axes[0][0].legend(loc="lower left")
    fig.suptitle(title)
    return _save(fig, path)


def plot_cam_panels(rows: Sequence[dict], path) -> str:
    """Rows of (original, overlay...) images; each row dict has ``title`` and ``images``."""
    ncol = max(len(r["images"]) for r in rows)
    fig, axes = plt.subplots(len(rows), ncol, figsize=(2.2 * ncol, 2.2 * len(rows)), squeeze=False)
    for ax_row, row in zip(axes, rows):
        for j, ax in enumerate(ax_row):
            ax.axis("off")
            if j < len(row["images"]):
                ax.imshow(np.clip(row["images"][j], 0, 1))
                if row.get("labels"):
                    ax.set_title(row["labels"][j], fontsize=7)
        ax_row[0].text(-0.1, 0.5, row.get("title", ""), transform=ax_row[0].transAxes,
                       rotation=90, va="center", ha="right", fontsize=7)
    return _save(fig, path)
