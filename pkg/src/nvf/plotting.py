"""PNG figures written next to the CSV outputs of ``fit`` and ``ablate``."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def _smooth(y, w: int):
    if w <= 1 or len(y) < w:
        return np.asarray(y, float)
    k = np.ones(w) / w
    return np.convolve(y, k, mode="valid")


def loss_curves(histories: dict, path, smooth: int = 20) -> None:
    """Per-step L1 (left) and total objective (right) on log axes, one line per run."""
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
        for name, hist in histories.items():
            if not hist:
                continue
            steps = np.array([h["step"] for h in hist])
            for ax, key in zip(axes, ("l1", "total")):
                y = _smooth([h[key] for h in hist], smooth)
                ax.plot(steps[len(steps) - len(y):], y, lw=1.2, label=name)
        for ax, title in zip(axes, ("L1", "objective")):
            ax.set_yscale("log")
            ax.set_xlabel("step")
            ax.set_title(title)
        axes[0].legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def ablation_bars(rows: list, path, metrics=("cd", "normal", "curl")) -> None:
    """One panel per metric; bars are the ablation variants (mean over shapes)."""
    names = [r["config"] for r in rows]
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.2))
        for ax, m in zip(np.atleast_1d(axes), metrics):
            vals = [np.nan if r.get(m) is None else float(r[m]) for r in rows]
            ax.bar(range(len(names)), vals, color="0.45")
            ax.set_xticks(range(len(names)))
            ax.set_xticklabels(names, rotation=35, ha="right")
            ax.set_title(m)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def tier_histogram(batch, path) -> None:
    """Distance-to-surface histogram of a query batch, split by noise tier."""
    from .geometry import TIERS

    d = np.linalg.norm(batch.displacements, axis=1)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        bins = np.logspace(np.log10(max(d.min(), 1e-6)), np.log10(max(d.max(), 1e-5)), 50)
        for i, name in enumerate(TIERS):
            sel = d[batch.tiers == i]
            if len(sel):
                ax.hist(sel, bins=bins, histtype="step", lw=1.2, label=f"{name} ({len(sel)})")
        ax.set_xscale("log")
        ax.set_xlabel("distance to surface")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
