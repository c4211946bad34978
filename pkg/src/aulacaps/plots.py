"""Figures written next to the CSV/JSON outputs. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import AU_NAMES  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_trace(rows: np.ndarray, au_indices, path, title: str = "") -> Path:
    """Ground truth (shaded) against predicted probability, one panel per AU."""
    au_indices = list(au_indices)
    fig, axes = plt.subplots(len(au_indices), 1, figsize=(8, 1.6 * len(au_indices) + 0.6), sharex=True, squeeze=False)
    frames = rows[:, 0]
    for ax, i in zip(axes[:, 0], au_indices):
        ax.fill_between(frames, 0, rows[:, 1 + i], step="mid", color="0.85", label="label")
        ax.plot(frames, rows[:, 13 + i], color="C0", lw=1.2, label="p")
        ax.axhline(0.5, color="C3", lw=0.6, ls="--")
        ax.set_ylim(-0.05, 1.05)
        ax.set_ylabel(AU_NAMES[i])
    axes[-1, 0].set_xlabel("frame")
    axes[0, 0].legend(loc="upper right", fontsize=7)
    if title:
        axes[0, 0].set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_coactivation(matrix: np.ndarray, path, names=AU_NAMES) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 4.8))
    im = ax.imshow(matrix, cmap="viridis")
    ax.set_xticks(range(len(names)), names, rotation=90, fontsize=7)
    ax.set_yticks(range(len(names)), names, fontsize=7)
    fig.colorbar(im, ax=ax, label="co-active frames")
    fig.tight_layout()
    return _save(fig, path)


def plot_saliency(frame: np.ndarray, saliency: np.ndarray, path, title: str = "") -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(6, 3.2))
    axes[0].imshow(frame, cmap="gray")
    axes[1].imshow(frame, cmap="gray")
    axes[1].imshow(saliency, cmap="jet", alpha=0.5, vmin=0, vmax=1)
    for ax in axes:
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_reconstructions(originals: np.ndarray, recons: np.ndarray, path) -> Path:
    """Top row inputs, bottom row reconstructions."""
    n = len(originals)
    fig, axes = plt.subplots(2, n, figsize=(1.6 * n, 3.4), squeeze=False)
    for k in range(n):
        axes[0, k].imshow(originals[k], cmap="gray", vmin=-1, vmax=1)
        axes[1, k].imshow(recons[k], cmap="gray", vmin=-1, vmax=1)
        axes[0, k].axis("off")
        axes[1, k].axis("off")
    fig.tight_layout()
    return _save(fig, path)


def plot_training_curves(log_rows: list[dict], path) -> Path:
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.4))
    for fold in sorted({r["fold"] for r in log_rows}):
        rows = [r for r in log_rows if r["fold"] == fold]
        ep = [r["epoch"] for r in rows]
        a.plot(ep, [r["train_loss"] for r in rows], marker="o", ms=3, label=f"fold {fold}")
        b.plot(ep, [r["val_avg_f1"] for r in rows], marker="o", ms=3, label=f"fold {fold}")
    a.set_xlabel("epoch")
    a.set_ylabel("train loss")
    b.set_xlabel("epoch")
    b.set_ylabel("val avg F1")
    a.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
