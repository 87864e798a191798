"""Figures written next to the delimited figure data (PNG and SVG)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "seqdesign"  # stable element ids
import matplotlib.pyplot as plt  # noqa: E402

MARKERS = {"sequential": "s", "robust": "+", "uniform": "*", "standard": "D", "hybrid": "o"}
FORMATS = ("png", "svg")


def _save(fig, stem: Path) -> list[Path]:
    out = []
    for ext in FORMATS:
        path = stem.with_suffix("." + ext)
        # fixed metadata keeps reruns byte-identical
        meta = {"Date": None} if ext == "svg" else {"Software": None}
        fig.savefig(path, dpi=110, bbox_inches="tight", metadata=meta)
        out.append(path)
    plt.close(fig)
    return out


def efficiency_curves(n, series: dict[str, list[float]], stem, title: str = "") -> list[Path]:
    """One line per design; NaN points (no finished stage yet) are skipped."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for name, ys in series.items():
        pts = [(x, y) for x, y in zip(n, ys) if not math.isnan(y)]
        if not pts:
            continue
        xs, vs = zip(*pts)
        ax.plot(xs, vs, marker=MARKERS.get(name, "."), ms=5, lw=1.2, label=name)
    ax.set_xlabel("sample size n")
    ax.set_ylabel("D-efficiency")
    ax.set_ylim(0, 1.05)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8, loc="lower right")
    return _save(fig, Path(stem))


def bars(groups: list[str], values: dict[str, list[float]], stem, ylabel: str, title: str = "") -> list[Path]:
    """Grouped bar chart: ``values[label][i]`` is the bar for ``groups[i]``."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    k = max(len(values), 1)
    width = 0.8 / k
    for j, (label, ys) in enumerate(values.items()):
        xs = [i - 0.4 + width * (j + 0.5) for i in range(len(groups))]
        ax.bar(xs, ys, width=width, label=label)
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels(groups)
    ax.set_ylabel(ylabel)
    ax.grid(axis="y", alpha=0.3)
    if title:
        ax.set_title(title)
    if len(values) > 1:
        ax.legend(fontsize=8)
    return _save(fig, Path(stem))
