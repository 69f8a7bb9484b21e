"""Figure output. Everything renders straight to files through the Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

CMAP = "jet"


def count_caption(label: str, grid: np.ndarray, scale: float = 1.0) -> str:
    return f"{label}: {float(np.sum(grid)) / scale:.1f}"


def plot_prediction_panels(
    image: np.ndarray,
    gt_map: np.ndarray | None,
    conv_map: np.ndarray,
    tran_map: np.ndarray,
    path: str | Path,
    title: str | None = None,
    density_scale: float = 1.0,
) -> list[str]:
    """Image, ground truth and the three predicted maps side by side; returns the panel captions."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 3:
        img = img.transpose(1, 2, 0)
    avg_map = 0.5 * (conv_map + tran_map)
    panels = [("image", None)]
    if gt_map is not None:
        panels.append(("GT", gt_map))
    panels += [("conv", conv_map), ("tran", tran_map), ("average", avg_map)]

    fig, axes = plt.subplots(1, len(panels), figsize=(2.6 * len(panels), 2.9))
    captions = []
    for ax, (label, grid) in zip(axes, panels):
        if grid is None:
            ax.imshow(np.clip(img, 0, 1))
            caption = label
        else:
            vmax = float(grid.max()) if grid.max() > 0 else 1.0
            ax.imshow(grid, cmap=CMAP, vmin=0.0, vmax=vmax, interpolation="nearest")
            caption = count_caption(label, grid, density_scale)
        captions.append(caption)
        ax.set_title(caption, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return captions


def plot_ablation(summary: list[dict], path: str | Path) -> None:
    """Mean validation MAE (with seed spread) against delta_max, one line per evaluation head."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for head, marker in (("conv", "s"), ("tran", "^"), ("average", "o")):
        rows = sorted((r for r in summary if r["head"] == head), key=lambda r: r["delta_max"])
        if not rows:
            continue
        x = [r["delta_max"] for r in rows]
        y = [r["mae_mean"] for r in rows]
        err = [r["mae_std"] for r in rows]
        ax.errorbar(x, y, yerr=err, marker=marker, capsize=3, label=head)
    ax.set_xlabel(r"$\delta_{max}$")
    ax.set_ylabel("validation MAE")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training_curves(history: list[dict], path: str | Path) -> None:
    epochs = [r["epoch"] for r in history]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3))
    ax0.plot(epochs, [r["train_loss"] for r in history])
    ax0.set_yscale("log")
    ax0.set_xlabel("epoch")
    ax0.set_ylabel("train loss")
    for key, label in (("val_mae_conv", "conv"), ("val_mae_tran", "tran"), ("val_mae", "average")):
        vals = [r.get(key) for r in history]
        if any(v is not None for v in vals):
            ax1.plot(epochs, vals, label=label)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("val MAE")
    ax1.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
