"""Matplotlib renderings of the CSV reports. Figures are written to files, never shown."""

from __future__ import annotations

from collections import defaultdict
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def plot_curves(rows: Sequence[Mapping], path, title: str = "") -> None:
    """One panel per metric, one line per run, from long-format curve rows."""
    series = defaultdict(lambda: defaultdict(list))
    for r in rows:
        series[r["metric"]][r["run"]].append((int(r["step"]), float(r["value"])))
    metrics = list(series) or ["(empty)"]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 2.6), squeeze=False)
        for ax, metric in zip(axes[0], metrics):
            for run, pts in series.get(metric, {}).items():
                pts.sort()
                ax.plot([p[0] for p in pts], [p[1] for p in pts], label=run, lw=1.2)
            ax.set_xlabel("step")
            ax.set_ylabel(metric)
            if series.get(metric):
                ax.legend(frameon=False)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)


def plot_ablation(rows: Sequence[Mapping], path) -> None:
    """Per-variant probe accuracy: seed dots plus the mean bar."""
    by_variant = defaultdict(list)
    for r in rows:
        by_variant[r["variant"]].append(float(r["probe_acc"]))
    names = list(by_variant)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        for i, v in enumerate(names):
            vals = by_variant[v]
            ax.bar(i, sum(vals) / len(vals), color="0.8", width=0.6)
            ax.plot([i] * len(vals), vals, "o", color="k", ms=3)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names)
        ax.set_ylabel("probe accuracy")
        lo = min(min(v) for v in by_variant.values()) if by_variant else 0.0
        ax.set_ylim(max(0.0, lo - 0.05), 1.0)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)


def plot_robustness(reports: Sequence[Mapping], path) -> None:
    """Original vs. transformed accuracy per model, annotated with the delta."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        for i, r in enumerate(reports):
            ax.bar(i - 0.18, float(r["original"]), width=0.36, color="0.6", label="original" if i == 0 else None)
            ax.bar(i + 0.18, float(r["transformed"]), width=0.36, color="0.85", label="swapped" if i == 0 else None)
            ax.annotate(f"{float(r['delta']):+.3f}", (i, max(float(r["original"]), float(r["transformed"]))),
                        ha="center", va="bottom", fontsize=8)
        ax.set_xticks(range(len(reports)))
        ax.set_xticklabels([r["name"] for r in reports])
        ax.set_ylabel("probe accuracy")
        ax.set_ylim(0.0, 1.08)
        ax.legend(frameon=False, loc="lower right")
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
