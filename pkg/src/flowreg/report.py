"""Matplotlib figure rendering for the CLI report paths.

Figures are written next to the delimited text outputs: per-stage loss
curves for a registration run, mid-slice overlays of the image triplet,
an evaluation panel (Dice bars plus a Jacobian-determinant slice), and
the snapshot time-lapse montage.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evalsynth import EvalReport
from .objective import LossBreakdown
from .volume import Volume3


def _mid_slice(vol: Volume3) -> np.ndarray:
    return vol.data[vol.data.shape[0] // 2]


def save_loss_figure(histories: dict[str, list[LossBreakdown]], path) -> None:
    """One panel per stage: total plus each loss term over iterations."""
    stages = [(name, h) for name, h in histories.items() if h]
    n = max(len(stages), 1)
    fig, axes = plt.subplots(1, n, figsize=(4.5 * n, 3.4), squeeze=False)
    for ax, (name, hist) in zip(axes[0], stages or [("(empty)", [])]):
        it = np.arange(1, len(hist) + 1)
        ax.plot(it, [b.total for b in hist], label="total", lw=1.6)
        ax.plot(it, [b.similarity for b in hist], label="similarity", lw=1.0)
        ax.plot(it, [b.lam * b.regularizer for b in hist], label="regularizer (weighted)", lw=1.0)
        if any(b.distill != 0.0 for b in hist):
            ax.plot(it, [b.distill for b in hist], label="distill", lw=1.0)
        ax.set_title(name)
        ax.set_xlabel("iteration")
        ax.set_yscale("symlog", linthresh=1e-8)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_overlay_figure(moving: Volume3, fixed: Volume3, moved: Volume3, path) -> None:
    """Mid-slice panels: moving, fixed, moved, and |moved - fixed|."""
    panels = [
        ("moving", _mid_slice(moving)),
        ("fixed", _mid_slice(fixed)),
        ("moved", _mid_slice(moved)),
        ("|moved - fixed|", np.abs(_mid_slice(moved) - _mid_slice(fixed))),
    ]
    fig, axes = plt.subplots(1, 4, figsize=(13, 3.4))
    for ax, (title, img) in zip(axes, panels):
        im = ax.imshow(img, cmap="gray", origin="lower")
        ax.set_title(title)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_eval_figure(report: EvalReport, detj: Volume3, path) -> None:
    """Dice bars alongside the mid-slice of the Jacobian determinant."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    labels = sorted(report.dice_per_label)
    ax1.bar([str(l) for l in labels], [report.dice_per_label[l] for l in labels], color="#4878b0")
    ax1.axhline(report.dice_mean, color="k", ls="--", lw=1, label=f"mean = {report.dice_mean:.3f}")
    ax1.set_ylim(0, 1.05)
    ax1.set_xlabel("label")
    ax1.set_ylabel("Dice")
    ax1.legend(fontsize=8)

    sl = _mid_slice(detj)
    im = ax2.imshow(sl, cmap="coolwarm", origin="lower", vmin=0.0, vmax=2.0)
    ax2.set_title(f"det J (mid slice), folds = {report.fold_fraction:.2%}")
    ax2.axis("off")
    fig.colorbar(im, ax=ax2, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_snapshot_figure(snaps: list[Volume3], path) -> None:
    """Time-lapse montage of the moving image flowing into the moved image."""
    n = len(snaps)
    cols = min(n, 6)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.4 * cols, 2.6 * rows), squeeze=False)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        ax.axis("off")
        if i < n:
            ax.imshow(_mid_slice(snaps[i]), cmap="gray", origin="lower")
            ax.set_title(f"step {i}/{n - 1}" if n > 1 else "step 0", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
