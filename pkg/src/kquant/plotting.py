"""Report figures, rendered to files with the Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .gaussmath import normal_cdf_array  # noqa: E402
from .quantize import ThresholdTable, quantile_levels  # noqa: E402


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_threshold_table(table: ThresholdTable, path, title: str | None = None) -> Path:
    """Normal CDF with the equal-probability cut levels and the integer thresholds they induce."""
    p = table.source
    lo = min(0.0, p.mu - 3 * p.sigma)
    hi = max(table.thresholds[-1] * 1.1, p.mu + 3 * p.sigma)
    xs = np.linspace(lo, hi, 600)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, normal_cdf_array(xs, p.mu, p.sigma), color="k", lw=1.5)
    ax.axhline(table.z, color="tab:red", lw=0.8, ls=":")
    for b, t in zip(quantile_levels(p, table.b_a), table.thresholds):
        ax.axhline(b, color="tab:blue", lw=0.6, ls="--")
        ax.axvline(t, color="tab:green", lw=0.8)
    ax.axvline(0, color="tab:red", lw=0.8, ls=":")
    ax.set_xlabel("MAC value")
    ax.set_ylabel("F(x)")
    ax.set_title(title or f"b_a={table.b_a}, mu={p.mu:.4g}, sigma={p.sigma:.4g}")
    return _finish(fig, path)


def plot_ranges(report, path) -> Path:
    rows = [r for r in report.rows if r.acc_bits]
    fig, ax = plt.subplots(figsize=(max(5, 0.5 * len(rows) + 2), 3.5))
    ax.bar(range(len(rows)), [r.acc_bits for r in rows], color="tab:gray")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([r.name for r in rows], rotation=60, ha="right", fontsize=8)
    ax.set_ylabel("accumulator bits")
    return _finish(fig, path)


def plot_hw_cost(cost, path) -> Path:
    rows = cost.rows
    fig, ax = plt.subplots(figsize=(max(5, 0.5 * len(rows) + 2), 3.5))
    ax.bar(range(len(rows)), [r.comparator_bits for r in rows], color="tab:blue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([r.name for r in rows], rotation=60, ha="right", fontsize=8)
    ax.set_ylabel("comparator bits")
    return _finish(fig, path)


def plot_training(records: list[dict], path) -> Path:
    epochs = [r["epoch"] for r in records]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(epochs, [r["loss"] for r in records], color="tab:red", label="loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [r["accuracy"] for r in records], color="tab:blue", label="train acc")
    if records and "test_accuracy" in records[0]:
        ax2.plot(epochs, [r["test_accuracy"] for r in records], color="tab:blue", ls="--", label="test acc")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(0, 1)
    for a, b in zip(records, records[1:]):
        if b["stage"] != a["stage"]:
            ax1.axvline(b["epoch"] - 0.5, color="k", lw=0.5, ls=":")
    ax2.legend(loc="center right", fontsize=8)
    return _finish(fig, path)
