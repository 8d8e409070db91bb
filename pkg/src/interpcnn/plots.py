"""Figure rendering for the reporting paths; every plot lands next to the
CSV it illustrates."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def save_training_curves(rows, path) -> Path:
    """Loss and accuracy per epoch for the train and val splits."""
    path = Path(path)
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    for split, style in (("train", "-"), ("val", "--")):
        mine = [r for r in rows if r.split == split]
        if not mine:
            continue
        epochs = [r.epoch for r in mine]
        ax_loss.plot(epochs, [r.loss for r in mine], style, label=split)
        ax_acc.plot(epochs, [r.accuracy for r in mine], style, label=split)
        if any(r.miou_inst is not None for r in mine):
            ax_acc.plot(epochs, [r.miou_inst for r in mine], style,
                        alpha=0.6, label=f"{split} mIoU")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_confusion_matrix(matrix: np.ndarray, path, class_names=None) -> Path:
    path = Path(path)
    k = matrix.shape[0]
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * k, 1.0 + 0.6 * k))
    ax.imshow(matrix, cmap="Blues")
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(int(matrix[i, j])), ha="center", va="center", fontsize=8)
    names = class_names or [str(i) for i in range(k)]
    ax.set_xticks(range(k), names, rotation=45, ha="right")
    ax.set_yticks(range(k), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_bench_plot(rows: list[dict], path) -> Path:
    """Forward/backward time against point count, one line per batch size."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    batches = sorted({r["batch"] for r in rows})
    for batch in batches:
        mine = sorted((r for r in rows if r["batch"] == batch), key=lambda r: r["points"])
        pts = [r["points"] for r in mine]
        ax.errorbar(pts, [r["forward_ms_mean"] for r in mine],
                    yerr=[r["forward_ms_std"] for r in mine],
                    marker="o", label=f"forward, batch {batch}")
        if any(r.get("backward_ms_mean") for r in mine):
            ax.errorbar(pts, [r["backward_ms_mean"] for r in mine],
                        yerr=[r["backward_ms_std"] for r in mine],
                        marker="s", linestyle="--", label=f"backward, batch {batch}")
    ax.set_xlabel("points per cloud")
    ax.set_ylabel("time per batch (ms)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_check_report_plot(reports, path) -> Path:
    """Measured error vs tolerance per verification check, log scale."""
    path = Path(path)
    names = [r.name for r in reports]
    measured = [max(r.measured, 1e-18) if np.isfinite(r.measured) else 1.0 for r in reports]
    tolerance = [max(r.tolerance, 1e-18) for r in reports]
    colors = ["tab:green" if r.passed else "tab:red" for r in reports]
    fig, ax = plt.subplots(figsize=(8, 0.35 * len(reports) + 1.5))
    y = np.arange(len(reports))
    ax.barh(y, measured, color=colors)
    ax.plot(tolerance, y, "k|", markersize=10, label="tolerance")
    ax.set_yticks(y, names, fontsize=8)
    ax.set_xscale("log")
    ax.set_xlabel("measured (bars) vs tolerance (ticks)")
    ax.invert_yaxis()
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
