"""Matplotlib figures rendered next to the delimited report files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

METRIC_NAMES = ("MI", "VIF", "Qabf", "SSIM")


def _metric_columns(reports):
    return {
        "MI": [r.mi for r in reports],
        "VIF": [r.vif for r in reports],
        "Qabf": [r.qabf for r in reports],
        "SSIM": [r.ssim for r in reports],
    }


def save_loss_curve(history, path, start_epoch: int = 0):
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = range(start_epoch, start_epoch + len(history))
    ax.plot(epochs, history, marker="o", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_title("training loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metric_figure(reports, summary, path):
    """One panel per metric: per-image values plus the mean line."""
    cols = _metric_columns(reports)
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    for ax, name in zip(axes.ravel(), METRIC_NAMES):
        values = cols[name]
        ax.bar(range(len(values)), values, color="#4878a8")
        if summary is not None:
            ax.axhline(getattr(summary, name.lower()), color="#c44e52", linestyle="--",
                       label=f"mean {getattr(summary, name.lower()):.4f}")
            ax.legend(fontsize=8)
        ax.set_title(name)
        ax.set_xlabel("image index")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_figure(variant_names, summaries, path):
    """Grouped bars: one cluster per metric, one bar per variant."""
    fig, ax = plt.subplots(figsize=(8, 5))
    width = 0.8 / max(len(variant_names), 1)
    for i, (name, summary) in enumerate(zip(variant_names, summaries)):
        values = [summary.mi, summary.vif, summary.qabf, summary.ssim]
        positions = [m + i * width for m in range(len(METRIC_NAMES))]
        ax.bar(positions, values, width=width, label=name)
    ax.set_xticks([m + 0.4 - width / 2 for m in range(len(METRIC_NAMES))])
    ax.set_xticklabels(METRIC_NAMES)
    ax.set_ylabel("mean value")
    ax.set_title("ablation comparison")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
