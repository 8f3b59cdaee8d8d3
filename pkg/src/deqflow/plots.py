"""SVG figures for experiment outputs (matplotlib, non-interactive backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SVG_META = {"Date": None, "Creator": None}


def _save(fig, path):
    with matplotlib.rc_context({"svg.hashsalt": "deqflow"}):
        fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def line_plot(path, series, xlabel, ylabel, logx=False, logy=False, title=None):
    """One line per entry of ``series`` (label -> (x, y))."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (x, y) in series.items():
        y = np.asarray(y, dtype=float)
        if logy:
            y = np.where(y > 0, y, np.nan)
        ax.plot(x, y, marker="o" if len(y) < 12 else None, label=label)
    if logx:
        ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) <= 12:
        ax.legend(fontsize="small")
    fig.tight_layout()
    _save(fig, path)


def bar_chart(path, labels, groups, title=None):
    """Grouped bars: ``groups`` maps a group name to one value per label."""
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(labels)), 4))
    x = np.arange(len(labels))
    width = 0.8 / max(1, len(groups))
    for k, (name, values) in enumerate(groups.items()):
        ax.bar(x + k * width, values, width, label=name)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize="small")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
