"""Figures for prior tables and accuracy comparisons (non-interactive backend)."""

from __future__ import annotations

import io
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .artifacts import atomic_write_bytes  # noqa: E402
from .evaluation import EvaluationReport  # noqa: E402
from .ingest import CATEGORIES  # noqa: E402
from .priors import PriorTable  # noqa: E402


def _save(fig, path) -> Path:
    buf = io.BytesIO()
    # no software tag or timestamp, so identical figures give identical bytes
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return atomic_write_bytes(path, buf.getvalue())


def plot_prior(table: PriorTable, path, title: str | None = None) -> Path:
    """One line per category with any support, bins on the x axis."""
    fig, ax = plt.subplots(figsize=(9, 4.5))
    x = np.arange(len(table.labels))
    for c in CATEGORIES:
        row = table.probs[c.index]
        if row.sum() > 0:
            ax.plot(x, row, marker="o", ms=3, label=c.value)
    ax.set_xticks(x)
    ax.set_xticklabels(table.labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("probability")
    ax.set_title(title or f"{table.kind} prior")
    ax.legend(fontsize=8, ncol=4)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_accuracy(reports: Mapping[str, EvaluationReport], path) -> Path:
    """Grouped bars: per-category accuracy of every method, plus OA and AA."""
    names = [c.value for c in CATEGORIES] + ["OA", "AA"]
    methods = list(reports)
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(10, 4.5))
    x = np.arange(len(names))
    for i, m in enumerate(methods):
        r = reports[m]
        vals = [r.accuracy.get(c, np.nan) for c in CATEGORIES] + [r.overall, r.average]
        ax.bar(x + (i - (len(methods) - 1) / 2) * width, vals, width, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_prior_comparison(learned: PriorTable, reference: PriorTable, path, title: str = "") -> Path:
    """Learned versus reference rows, one panel per category."""
    fig, axes = plt.subplots(2, 4, figsize=(13, 5.5), sharey=True)
    x = np.arange(len(learned.labels))
    for ax, c in zip(axes.flat, CATEGORIES):
        ax.plot(x, learned.probs[c.index], label="potential visits")
        ax.plot(x, reference.probs[c.index], "--", label="activity logs")
        ax.set_title(c.value, fontsize=9)
        ax.tick_params(labelsize=7)
    axes.flat[-1].axis("off")
    axes.flat[0].legend(fontsize=7)
    fig.suptitle(title or f"{learned.kind} prior")
    fig.tight_layout()
    return _save(fig, path)
