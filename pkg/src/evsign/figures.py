"""Matplotlib figure rendering for training and evaluation reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE_KW = {"dpi": 110, "metadata": {"Software": None}}


def train_curves(rows: list[dict], path: str | Path):
    """Loss and dev-WER trajectories, one panel each."""
    epochs = [r["epoch"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    axes[0].plot(epochs, [r["train_loss"] for r in rows], marker=".")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("train loss")
    axes[0].grid(alpha=0.3)
    axes[1].plot(epochs, [r["dev_wer"] for r in rows], marker=".", color="tab:red")
    if any("dev_bleu1" in r for r in rows):
        twin = axes[1].twinx()
        twin.plot(epochs, [r.get("dev_bleu1", np.nan) for r in rows],
                  marker=".", color="tab:green")
        twin.set_ylabel("dev BLEU-1")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("dev WER")
    axes[1].grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def score_figure(report: dict, clip_wers: list[float], path: str | Path):
    """Summary bars plus the per-clip WER histogram."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    labels = ["WER", "B-1", "B-2", "B-3", "B-4", "R-L"]
    values = [report["wer"], *[b / 100.0 for b in report["bleu"]],
              report["rouge_l"]]
    axes[0].bar(labels, values, color="tab:blue")
    axes[0].set_ylim(0, 1.05)
    axes[0].set_title(f"{report['split']} (n={report['n_clips']})")
    axes[0].grid(axis="y", alpha=0.3)
    axes[1].hist(clip_wers, bins=np.linspace(0, max(1.0, max(clip_wers or [1.0])), 21),
                 color="tab:orange")
    axes[1].set_xlabel("per-clip WER")
    axes[1].set_ylabel("clips")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def mask_heatmap(mask: np.ndarray, path: str | Path):
    """Fused-token x visual-token attention gate as an image."""
    fig, ax = plt.subplots(figsize=(6, 3))
    im = ax.imshow(mask, aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xlabel("visual token")
    ax.set_ylabel("fused token")
    fig.colorbar(im, ax=ax, shrink=0.9)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
