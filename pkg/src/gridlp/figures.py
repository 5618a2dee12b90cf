"""Matplotlib renderings for the report path: per-device load heatmaps and
aggregate timing bars, written to files next to the delimited output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_layout_heatmap(summary: dict, path, title: str = "") -> None:
    """Per-device nonzero counts of one layout as an annotated grid."""
    rows = summary["grid"]["rows"]
    cols = summary["grid"]["cols"]
    counts = np.zeros((rows, cols))
    for dev in summary["devices"]:
        counts[dev["i"], dev["j"]] = dev["nnz"]

    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * cols, 1.2 + 0.9 * rows))
    im = ax.imshow(counts, cmap="viridis")
    for i in range(rows):
        for j in range(cols):
            ax.text(j, i, f"{int(counts[i, j]):,}", ha="center", va="center",
                    color="white", fontsize=8)
    ax.set_xticks(range(cols))
    ax.set_yticks(range(rows))
    ax.set_xlabel("grid column")
    ax.set_ylabel("grid row")
    ax.set_title(title or f"per-device nnz (max/mean {summary['nnz_max_over_mean']:.2f})")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_strategy_bars(aggregates: list[dict], value_key: str, path,
                         ylabel: str = "", title: str = "") -> None:
    """One bar per strategy cell, grouped by permutation then partitioning."""
    labels = [f"{a['permutation']}\n{a['partitioning']}" for a in aggregates]
    values = [a[value_key] for a in aggregates]

    fig, ax = plt.subplots(figsize=(1.6 + 0.9 * len(labels), 3.6))
    bars = ax.bar(range(len(labels)), values, color="tab:blue")
    ax.bar_label(bars, fmt="%.3g", fontsize=8)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel(ylabel or value_key)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
