"""Delay-distribution figures written next to the CSV records."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness.metrics import Metrics  # noqa: E402


def _ecdf(values):
    v = np.sort(np.asarray(values, dtype=float))
    return v, np.arange(1, len(v) + 1) / len(v)


def plot_delays(metrics: Metrics, out_dir, scale: float = 1.0, unit: str = "steps",
                title: str = "") -> list:
    """Write a histogram and an empirical CDF of both delays. Returns the file paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    series = {"replayer delay": np.asarray(metrics.replayer_delays(), dtype=float) * scale,
              "apply delay": np.asarray(metrics.apply_delays(), dtype=float) * scale}
    paths = []

    fig, axes = plt.subplots(1, 2, figsize=(10, 3.8))
    for ax, (name, vals) in zip(axes, series.items()):
        if len(vals):
            ax.hist(vals, bins=min(60, max(5, len(vals) // 20)), color="#4c72b0", alpha=0.85)
            ax.axvline(np.median(vals), color="k", lw=1, ls="--", label="median")
            ax.legend(frameon=False)
        ax.set_xlabel(f"{name} ({unit})")
        ax.set_ylabel("count")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    p = out / "delay_hist.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for name, vals in series.items():
        if len(vals):
            x, y = _ecdf(vals)
            ax.step(x, y, where="post", label=name)
    ax.set_xlabel(unit)
    ax.set_ylabel("fraction of deliveries")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    p = out / "delay_cdf.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)
    return paths
