"""Matplotlib rendering of report grids, written next to the CSV output."""

from __future__ import annotations

import numpy as np

__all__ = ["render_report_figures"]


def _mpl():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _classification_figure(report, path):
    plt = _mpl()
    columns = ["natural", *report.attack_names]
    if report.ensemble:
        columns.append("ensemble")
    defenses = report.defense_names
    x = np.arange(len(columns))
    width = 0.8 / max(1, len(defenses))
    fig, ax = plt.subplots(figsize=(1.8 + 1.1 * len(columns), 3.6))
    for i, dname in enumerate(defenses):
        vals = [report.natural[dname]]
        vals += [report.cells[dname][a] for a in report.attack_names]
        if "ensemble" in columns:
            vals.append(report.ensemble.get(dname, np.nan))
        ax.bar(x + (i - (len(defenses) - 1) / 2) * width, 100.0 * np.asarray(vals, dtype=float), width, label=dname)
    ax.set_xticks(x, columns)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    ax.set_title("robust accuracy by attack and defense")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _stereo_figure(report, path):
    plt = _mpl()
    metrics = ("mae", "rmse", "d1")
    columns = ["natural", *report.attack_names]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.4))
    x = np.arange(len(columns))
    for ax, m in zip(axes, metrics):
        for dname in report.defense_names:
            vals = [report.natural[dname][m]] + [report.cells[dname][a][m] for a in report.attack_names]
            ax.plot(x, vals, marker="o", label=dname)
        ax.set_xticks(x, columns, rotation=30, ha="right", fontsize=7)
        ax.set_title(m)
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("disparity error")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_report_figures(report, out_dir, stem="report"):
    """Render the report's headline chart(s) to PNG; returns written paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    if report.task == "classification":
        p = os.path.join(out_dir, f"{stem}_accuracy.png")
        _classification_figure(report, p)
        paths.append(p)
    else:
        p = os.path.join(out_dir, f"{stem}_metrics.png")
        _stereo_figure(report, p)
        paths.append(p)
    return paths
