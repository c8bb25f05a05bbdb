"""
xDiff Plots
Static SVG figures for run comparisons and parameter sweeps
"""

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no timestamp, so identical data gives identical files
matplotlib.rcParams["svg.hashsalt"] = "xdiff"
matplotlib.rcParams["font.size"] = 10
matplotlib.rcParams["axes.grid"] = True
matplotlib.rcParams["grid.alpha"] = 0.3


def new_figure(width: float = 6.0, height: float = None):
    golden_ratio = (math.sqrt(5) - 1.0) / 2.0
    fig, ax = plt.subplots(figsize=(width, height or width * golden_ratio))
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def cdf_plot(series: Mapping[str, Sequence[float]], xlabel: str, path, log_x: bool = False) -> Path:
    """Empirical CDF per label"""
    fig, ax = new_figure()
    for label in sorted(series):
        values = np.sort(np.asarray(series[label], dtype=float))
        if values.size == 0:
            continue
        ax.step(values, np.arange(1, values.size + 1) / values.size, where="post", label=label)
    if log_x:
        ax.set_xscale("symlog")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("CDF")
    ax.set_ylim(0.0, 1.0)
    ax.legend(loc="lower right")
    return save(fig, path)


def timeseries_plot(series: Mapping[str, Sequence[float]], ylabel: str, path, window: int = 20,
                    marker_at: float = None) -> Path:
    """Per-slot series smoothed with a trailing mean; marker_at draws a vertical line (e.g. a demand step)"""
    fig, ax = new_figure(width=7.0)
    for label in sorted(series):
        y = np.asarray(series[label], dtype=float)
        if y.size == 0:
            continue
        kernel = np.ones(min(window, y.size))
        smooth = np.convolve(y, kernel, mode="full")[:y.size] / np.convolve(np.ones_like(y), kernel, mode="full")[:y.size]
        ax.plot(np.arange(y.size), smooth, label=label, linewidth=1.2)
    if marker_at is not None:
        ax.axvline(marker_at, color="grey", linestyle="--", linewidth=1)
    ax.set_xlabel("slot")
    ax.set_ylabel(ylabel)
    ax.legend(loc="best")
    return save(fig, path)


def sweep_plot(param: str, values: Sequence[float], means: Sequence[float], stds: Sequence[float], path) -> Path:
    fig, ax = new_figure()
    x = np.arange(len(values))
    ax.errorbar(x, means, yerr=stds, marker="o", capsize=4)
    ax.set_xticks(x)
    ax.set_xticklabels([f"{v:g}" for v in values])
    ax.set_xlabel(param)
    ax.set_ylabel("mean slot reward (final third)")
    return save(fig, path)
