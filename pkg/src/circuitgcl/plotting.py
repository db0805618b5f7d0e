"""Figure rendering for the CLI report paths (headless, PNG files only)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RELATION_COLORS = {"pos": "tab:green", "noneq": "tab:blue", "neg": "tab:red"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # drop the version string so reruns write identical files
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_pretrain_curves(rows: Sequence[Mapping], path) -> Path:
    """Loss on the left axis, relation cosine means (when present) on the right."""
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.4))
    ax[0].plot(epochs, [r["mean_loss"] for r in rows], color="black")
    ax[0].set_xlabel("epoch")
    ax[0].set_ylabel("training loss")
    for key, color in RELATION_COLORS.items():
        vals = [r.get(f"{key}_mean", float("nan")) for r in rows]
        ax[1].plot(epochs, vals, color=color, label=key)
    ax[1].set_xlabel("epoch")
    ax[1].set_ylabel("mean cosine")
    ax[1].set_ylim(-1.05, 1.05)
    ax[1].legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_relation_bars(stats: Mapping[str, float], path, title: str = "") -> Path:
    keys = [k for k in RELATION_COLORS if f"{k}_mean" in stats]
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    ax.bar(keys, [stats[f"{k}_mean"] for k in keys],
           yerr=[stats.get(f"{k}_std", 0.0) for k in keys],
           color=[RELATION_COLORS[k] for k in keys], capsize=4)
    ax.axhline(0.0, color="grey", lw=0.8)
    ax.set_ylim(-1.05, 1.05)
    ax.set_ylabel("mean cosine")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def plot_regression_fit(y_true, y_pred, names: Sequence[str], path) -> Path:
    k = len(names)
    fig, axes = plt.subplots(1, k, figsize=(3.2 * k, 3.2), squeeze=False)
    for j, name in enumerate(names):
        ax = axes[0, j]
        ax.scatter(y_true[:, j], y_pred[:, j], s=8)
        lo = min(y_true[:, j].min(), y_pred[:, j].min())
        hi = max(y_true[:, j].max(), y_pred[:, j].max())
        ax.plot([lo, hi], [lo, hi], color="grey", lw=0.8)
        ax.set_xlabel(f"true {name}")
        ax.set_ylabel("predicted")
    fig.tight_layout()
    return _save(fig, path)
