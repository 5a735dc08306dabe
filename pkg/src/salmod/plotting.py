"""SVG figures written next to the CSV reports.

Output is byte-stable: fixed hash salt and no date metadata.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "svg.hashsalt": "salmod",
    "svg.fonttype": "none",
    "font.size": 10,
    "axes.linewidth": 0.8,
    "legend.fontsize": 8,
    "legend.frameon": False,
})

_METADATA = {"Date": None, "Creator": "salmod"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", bbox_inches="tight", metadata=_METADATA)
    plt.close(fig)
    return path


def _k_axis(k_list: Sequence) -> tuple[np.ndarray, list[str]]:
    return np.arange(len(k_list)), [str(k) for k in k_list]


def accuracy_vs_k(path, k_list: Sequence, series: dict[str, Sequence[float]],
                  errors: dict[str, Sequence[float]] | None = None):
    """One line per method, k on a categorical axis (k may include ``K``)."""
    x, labels = _k_axis(k_list)
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for name in sorted(series):
        ys = np.asarray(series[name], dtype=float)
        if errors and name in errors:
            ax.errorbar(x, ys, yerr=errors[name], marker="o", ms=3, capsize=2, lw=1.2, label=name)
        else:
            ax.plot(x, ys, marker="o", ms=3, lw=1.2, label=name)
    ax.set_xticks(x, labels)
    ax.set_xlabel("training images per class (k)")
    ax.set_ylabel("test accuracy (%)")
    ax.grid(alpha=0.3, lw=0.5)
    ax.legend(loc="lower right")
    return _save(fig, path)


def correlation_scatter(path, points, coefficient: float):
    xs = np.array([p.nss for p in points])
    ys = np.array([p.accuracy for p in points])
    fig, ax = plt.subplots(figsize=(4.2, 3.4))
    ax.scatter(xs, ys, s=18, color="k", zorder=3)
    for p in points:
        ax.annotate(p.method, (p.nss, p.accuracy), fontsize=7, xytext=(3, 3), textcoords="offset points")
    slope, intercept = np.polyfit(xs, ys, 1)
    grid = np.linspace(xs.min(), xs.max(), 50)
    ax.plot(grid, slope * grid + intercept, lw=1.0, color="tab:red", label=f"fit, r = {coefficient:.2f}")
    ax.set_xlabel("NSS")
    ax.set_ylabel("test accuracy (%)")
    ax.legend(loc="upper left")
    return _save(fig, path)


def gradient_energy(path, saliency: Sequence[float], baseline: Sequence[float]):
    epochs = np.arange(1, len(saliency) + 1)
    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    ax.plot(epochs, 100 * np.asarray(saliency), lw=1.2, label="saliency model")
    ax.plot(epochs, 100 * np.asarray(baseline), lw=1.2, ls="--", label="baseline")
    ax.set_xlabel("epoch")
    ax.set_ylabel("gradient energy in box (%)")
    ax.grid(alpha=0.3, lw=0.5)
    ax.legend()
    return _save(fig, path)
