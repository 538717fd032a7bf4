"""Matplotlib figures written next to the JSON reports."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_bins(bins: Mapping[str, list[dict]], path) -> Path:
    """ROUGE-L and question count per threshold, one panel per binning key."""
    keys = [k for k, rows in bins.items() if rows]
    fig, axes = plt.subplots(1, max(1, len(keys)), figsize=(4.5 * max(1, len(keys)), 3.5), squeeze=False)
    for ax, key in zip(axes[0], keys):
        rows = bins[key]
        xs = [r["threshold"] for r in rows]
        ys = [100 * r["rouge_l"] if r["rouge_l"] is not None else float("nan") for r in rows]
        ax.plot(xs, ys, marker="o")
        for x, y, r in zip(xs, ys, rows):
            ax.annotate(f"n={r['count']}", (x, y), textcoords="offset points", xytext=(0, 6), ha="center",
                        fontsize=8)
        ax.set_xlabel(f"{key} threshold (>)")
        ax.set_ylabel("ROUGE-L")
    if not keys:
        axes[0][0].text(0.5, 0.5, "no bins", ha="center", va="center")
    return _save(fig, path)


def plot_losses(curves: Mapping[str, Sequence[float]], path, window: int = 20) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, losses in curves.items():
        if not losses:
            continue
        w = max(1, min(window, len(losses)))
        smooth = [sum(losses[max(0, i - w + 1): i + 1]) / (i + 1 - max(0, i - w + 1)) for i in range(len(losses))]
        ax.plot(range(1, len(losses) + 1), smooth, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if curves:
        ax.legend()
    return _save(fig, path)


def plot_ablation(rows: Sequence[dict], path, metric: str = "rouge_l") -> Path:
    fig, ax = plt.subplots(figsize=(1.2 * max(3, len(rows)) + 1, 3.5))
    names = [r["variant"] for r in rows]
    vals = [100 * (r.get(metric) or 0.0) for r in rows]
    ax.bar(names, vals)
    ax.set_ylabel(metric)
    ax.tick_params(axis="x", rotation=30)
    return _save(fig, path)


def plot_recall(rows: Sequence[dict], path) -> Path:
    """Per-question hit/miss strip for the faithfulness probe."""
    fig, ax = plt.subplots(figsize=(6, 1.8))
    hits = [1 if r["hit"] else 0 for r in rows]
    ax.bar(range(len(hits)), hits, width=1.0)
    ax.set_yticks([0, 1])
    ax.set_xlabel("question")
    ax.set_ylabel("hit")
    return _save(fig, path)
