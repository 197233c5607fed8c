"""SVG line plots of smoothed accuracy curves."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .report import group_label, mean_curve  # noqa: E402


def plot_curves(groups, path, title="Smoothed test top-1 accuracy"):
    """One line per group; returns the number of series drawn."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for key, runs in groups.items():
        steps, curve = mean_curve(runs)
        ax.plot(steps, 100.0 * curve, marker="o", markersize=3, label=group_label(key))
    ax.set_xlabel("training step")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the file byte-identical across re-runs
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return len(groups)
