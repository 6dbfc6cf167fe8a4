"""Figure rendering for evaluation and scaling outputs.

Every function writes a PNG next to the CSV/JSON it illustrates and
returns the path. Rendering uses the Agg backend so it works headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import percentile95
from .voldata import ORGAN_NAMES


def save_doe_boxplot(records, path):
    """Per-organ DOE distribution boxplot with the 95th percentile above each box."""

    by_organ = {name: [] for name in ORGAN_NAMES}
    for r in records:
        if r.doe_mm is not None:
            by_organ[r.organ].append(r.doe_mm)
    names = [n for n in ORGAN_NAMES if by_organ[n]]
    data = [by_organ[n] for n in names]

    fig, ax = plt.subplots(figsize=(10, 4.5))
    if data:
        ax.boxplot(data, tick_labels=names, whis=(5, 95), showfliers=False)
        for i, vals in enumerate(data, start=1):
            p95 = percentile95(vals)
            ax.annotate(
                f"{p95:.0f}",
                xy=(i, p95),
                xytext=(0, 4),
                textcoords="offset points",
                ha="center",
                fontsize=8,
            )
    ax.set_ylabel("detection offset error [mm]")
    ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_case_overlay(depth, reference, predicted, path):
    """Per-organ panels: depth image with reference (red) and prediction (green).

    Overlapping pixels render yellow. Panels share the depth image as a
    grayscale backdrop, displayed with the superior side up.
    """

    base = depth.values.T.astype(np.float64)
    n = len(reference.organ_names)
    cols = 4
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 3.2 * rows))
    axes = np.atleast_2d(axes)
    for k in range(rows * cols):
        ax = axes[k // cols, k % cols]
        ax.set_axis_off()
        if k >= n:
            continue
        rgb = np.repeat((0.65 * base)[:, :, None], 3, axis=2)
        ref = reference.channels[k].T.astype(np.float64)
        pred = predicted.channels[k].T.astype(np.float64)
        rgb[:, :, 0] = np.clip(rgb[:, :, 0] + 0.35 * ref, 0, 1)
        rgb[:, :, 1] = np.clip(rgb[:, :, 1] + 0.35 * pred, 0, 1)
        ax.imshow(rgb, origin="lower", interpolation="nearest")
        ax.set_title(reference.organ_names[k], fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def save_scaling_curves(rows, path):
    """Dice and DOE-95 against training-set size, one panel each."""

    sizes = [r["n_train"] for r in rows]
    dice_mean = [r["dice_mean"] for r in rows]
    dice_std = [r["dice_std"] for r in rows]
    doe95 = [r["doe_p95"] for r in rows]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax1.errorbar(sizes, dice_mean, yerr=dice_std, marker="o", capsize=3)
    ax1.set_xscale("log")
    ax1.set_xlabel("training cases")
    ax1.set_ylabel("Dice (mean over organs)")
    ax1.grid(True, alpha=0.3)
    ax2.plot(sizes, doe95, marker="s", color="tab:red")
    ax2.set_xscale("log")
    ax2.set_xlabel("training cases")
    ax2.set_ylabel("DOE 95th percentile [mm]")
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
