"""Figure rendering for reports: per-concept metric bars, dataset split
distributions, and training-loss curves, written as PNG files next to the
delimited report output."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .core import SplitStats
from .metrics import CONCEPT_ORDER, ConceptReport


def render_concept_bars(report: ConceptReport, path: str | Path, title: str = "Per-concept performance") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    concepts = [c for c in CONCEPT_ORDER if c in report.n]
    labels = ["All"] + [c.short_label for c in concepts]
    giou_vals = [report.overall_giou] + [report.per_concept_giou[c] for c in concepts]
    ciou_vals = [report.overall_ciou] + [report.per_concept_ciou[c] for c in concepts]

    x = range(len(labels))
    width = 0.38
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar([i - width / 2 for i in x], giou_vals, width, label="gIoU", color="#2b6cb0")
    ax.bar([i + width / 2 for i in x], ciou_vals, width, label="cIoU", color="#dd6b20")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels)
    ax.set_ylabel("score (%)")
    ax.set_ylim(0, 100)
    ax.set_title(title)
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_split_distribution(stats: SplitStats, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    splits = sorted(stats.per_split)
    ax1.bar(splits, [stats.per_split[s] for s in splits], color="#2b6cb0")
    ax1.set_title("Samples per split")
    ax1.tick_params(axis="x", rotation=20)
    concepts = [c for c in CONCEPT_ORDER if c in stats.per_concept]
    ax2.bar([c.short_label for c in concepts], [stats.per_concept[c] for c in concepts], color="#dd6b20")
    ax2.set_title("Samples per concept")
    fig.suptitle(f"total {stats.total}, prompt words {stats.prompt_word_mean:.1f} ± {stats.prompt_word_std:.1f}")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_loss_curve(log_csv: str | Path, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    steps, losses, lrs = [], [], []
    with open(log_csv, newline="") as f:
        for row in csv.DictReader(f):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
            lrs.append(float(row["lr"]))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, color="#2b6cb0", label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(steps, lrs, color="#dd6b20", alpha=0.6, label="lr")
    ax2.set_ylabel("learning rate")
    lines, labels = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines + lines2, labels + labels2, loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
