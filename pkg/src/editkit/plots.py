"""Matplotlib figure rendering for the report paths.

Every training and evaluation run drops PNG figures next to its delimited
output: loss curves for the two training loops, an aggregate bar chart for
metric reports, and a correlation table for the human-score comparison.
Figures are deterministic for identical data (fixed size, dpi, no
timestamps).
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import METRIC_COLUMNS, MetricReport


def _finish(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_loss_curves(rows: Sequence[dict], ycols: Sequence[str], path, title: str) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    xs = [r["step"] for r in rows]
    for col in ycols:
        if rows and col in rows[0]:
            ax.plot(xs, [r[col] for r in rows], label=col, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    _finish(fig, path)


def save_metric_summary(report: MetricReport, path, title: str = "aggregate metrics") -> None:
    agg = report.aggregates()
    names = [c for c in METRIC_COLUMNS if agg[c] is not None]
    vals = [agg[c] for c in names]
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.bar(range(len(names)), vals, color="#4878d0")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_title(f"{title} (n={len(report.rows)}, failed={report.failed_rows()})")
    ax.grid(alpha=0.3, axis="y")
    _finish(fig, path)


def save_correlation_table(rows: List[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 2.6))
    ax.axis("off")
    header = ["metric", "edit", "preserve", "n"]
    cells = [
        [
            r["metric"],
            "-" if r["edit"] is None else f"{r['edit']:.3f}",
            "-" if r["preserve"] is None else f"{r['preserve']:.3f}",
            str(r["n"]),
        ]
        for r in rows
    ]
    table = ax.table(cellText=cells, colLabels=header, loc="center")
    table.auto_set_font_size(False)
    table.set_fontsize(9)
    ax.set_title("correlation with human scores")
    _finish(fig, path)
