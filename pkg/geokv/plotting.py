"""Static bar charts of policy comparisons."""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from geokv._logger import logger  # noqa: E402
from geokv.telemetry import METRIC_LABELS, Comparison  # noqa: E402


def plot_comparison(
    comparison: Comparison,
    out_dir: str | Path,
    fmt: Literal["png", "svg"] = "png",
    stats: tuple[Literal["median", "mean", "p99"], ...] = ("median", "mean"),
) -> list[Path]:
    """One figure per statistic, one panel per metric, one bar per policy."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = comparison.labels
    x = np.arange(len(labels))
    written: list[Path] = []

    for stat in stats:
        fig, axes = plt.subplots(2, 4, figsize=(16, 7))
        for ax, metric in zip(axes.flat, METRIC_LABELS, strict=True):
            row = next(r for r in comparison.rows if r.metric == metric and r.stat == stat)
            values = [row.values[label] if row.values[label] is not None else 0.0 for label in labels]
            bars = ax.bar(x, values, color=[f"C{i}" for i in range(len(labels))])
            ax.bar_label(bars, fmt="%.1f", fontsize=7)
            ax.set_xticks(x)
            ax.set_xticklabels(labels, rotation=20, fontsize=8)
            ax.set_title(METRIC_LABELS[metric], fontsize=10)
            ax.grid(True, axis="y", linestyle="--", alpha=0.5)
        fig.suptitle(f"{stat.capitalize()} by policy (baseline {comparison.baseline})")
        fig.tight_layout()

        path = out_dir / f"compare_{stat}.{fmt}"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        logger.info(f"Wrote {path}")
        written.append(path)
    return written
