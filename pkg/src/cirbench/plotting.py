"""Figure rendering for report outputs.

Every CLI path that writes a delimited report also renders a figure next to
it: training traces get a loss curve, evaluation reports a recall chart,
and dataset statistics a per-split bar panel.  Uses the Agg backend so it
works headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .dataset import SplitStats
from .metrics import MetricReport
from .training import TraceRow


def save_loss_curve(trace: list[TraceRow], path: str | Path) -> Path:
    """Per-step loss with the per-epoch mean overlaid; twin axis for lr."""
    path = Path(path)
    steps = [row.step for row in trace]
    losses = [row.loss for row in trace]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.6, alpha=0.4, color="tab:blue", label="step loss")
    by_epoch: dict[int, list[TraceRow]] = {}
    for row in trace:
        by_epoch.setdefault(row.epoch, []).append(row)
    epoch_steps = [rows[-1].step for rows in by_epoch.values()]
    epoch_means = [float(np.mean([r.loss for r in rows])) for rows in by_epoch.values()]
    ax.plot(epoch_steps, epoch_means, lw=1.8, color="tab:red", label="epoch mean")
    ax.set_xlabel("step")
    ax.set_ylabel("triplet loss")
    ax.legend(loc="upper right", frameon=False)
    twin = ax.twinx()
    twin.plot(steps, [row.lr for row in trace], lw=0.8, color="tab:gray", alpha=0.6)
    twin.set_ylabel("learning rate", color="tab:gray")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_metric_chart(report: MetricReport, path: str | Path) -> Path:
    """Bar chart of recall / subset recall / mAP versus K."""
    path = Path(path)
    panels = [
        ("Recall@K", report.recall),
        ("Recall_Subset@K", report.recall_subset),
        ("mAP@K", report.mean_ap),
    ]
    panels = [(title, values) for title, values in panels if values]
    fig, axes = plt.subplots(1, max(len(panels), 1), figsize=(3.2 * max(len(panels), 1), 3.4))
    if len(panels) <= 1:
        axes = [axes]
    for ax, (title, values) in zip(axes, panels):
        ks = sorted(values)
        ax.bar([str(k) for k in ks], [values[k] for k in ks], color="tab:blue")
        ax.set_title(title)
        ax.set_xlabel("K")
        ax.set_ylim(0, 100)
        for index, k in enumerate(ks):
            ax.text(index, values[k] + 1.5, f"{values[k]:.1f}",
                    ha="center", fontsize=8)
    axes[0].set_ylabel("percent")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_stats_chart(rows: list[SplitStats], path: str | Path) -> Path:
    """Per-split subset/pair/image counts as bar panels."""
    path = Path(path)
    rows = [row for row in rows if row.split != "total"] or rows
    labels = [row.split for row in rows]
    fig, axes = plt.subplots(1, 3, figsize=(9.5, 3.2))
    for ax, (title, values) in zip(axes, (
        ("subsets", [row.subsets for row in rows]),
        ("pairs", [row.pairs for row in rows]),
        ("images", [row.images for row in rows]),
    )):
        ax.bar(labels, values, color="tab:blue")
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
