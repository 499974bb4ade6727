"""Matplotlib figures written next to the tabular reports."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def pretty_plot(width=8, height=None, nrows=1, ncols=1):
    """Figure and axes with readable default font sizes.

    Height defaults to ``width`` times the golden ratio.
    """
    golden_ratio = (math.sqrt(5) - 1.0) / 2.0
    if not height:
        height = width * golden_ratio
    rc = {
        "font.size": width * 1.6,
        "axes.labelsize": width * 1.8,
        "axes.titlesize": width * 1.8,
        "legend.fontsize": width * 1.4,
        "xtick.labelsize": width * 1.5,
        "ytick.labelsize": width * 1.5,
    }
    with plt.rc_context(rc):
        fig, axes = plt.subplots(nrows, ncols, figsize=(width, height), facecolor="w")
    return fig, axes


def plot_ablation(report: dict, path) -> None:
    rows = report["rows"]
    metrics = report["metrics"]
    fig, ax = pretty_plot(9, 5)
    x = np.arange(len(metrics))
    width = 0.8 / max(len(rows), 1)
    for k, row in enumerate(rows):
        before = [row["before"][m] for m in metrics]
        after = [row["after"][m] for m in metrics]
        ax.bar(x + k * width, before, width, label=f"{row['label']}")
        ax.bar(x + k * width, np.subtract(after, before), width, bottom=before,
               color="none", edgecolor="k", hatch="//", linewidth=0.5)
    ax.set_xticks(x + width * (len(rows) - 1) / 2)
    ax.set_xticklabels(metrics)
    ax.set_ylabel("score (x100)")
    ax.set_title("modality ablation (hatched: post-processing gain)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training_log(rows, path) -> None:
    """Loss (CE) and mean reward (SCST) against the global step."""
    ce = [r for r in rows if r.get("stage") == "ce"]
    sc = [r for r in rows if r.get("stage") == "scst"]
    fig, axes = pretty_plot(10, 4, ncols=2)
    if ce:
        axes[0].plot([r["step"] for r in ce], [r["loss"] for r in ce], lw=1)
        ax2 = axes[0].twinx()
        ax2.plot([r["step"] for r in ce], [r["lr"] for r in ce], color="tab:orange", lw=1)
        ax2.set_ylabel("learning rate")
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("CE loss (nats/token)")
    if sc:
        axes[1].plot([r["step"] for r in sc], [r["reward_mean"] for r in sc], lw=1, label="sample")
        axes[1].plot([r["step"] for r in sc], [r["baseline_mean"] for r in sc], lw=1, label="greedy")
        axes[1].legend(frameon=False)
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("reward")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metric_histogram(report: dict, path, metric: str = "CIDEr") -> None:
    vals = [p[metric] for p in report["per_image"]]
    fig, ax = pretty_plot(6)
    ax.hist(vals, bins=30)
    ax.set_xlabel(f"per-image {metric}")
    ax.set_ylabel("images")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
