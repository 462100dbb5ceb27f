"""Matplotlib figure rendering for the report path.

Every figure-producing CLI command writes a PNG next to its delimited
output. Agg backend only; no interactive windows.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def save_heatmap_figure(heatmap: np.ndarray, image: np.ndarray, gt_boxes: np.ndarray,
                        title: str, path: str | Path) -> None:
    """Scene next to its proposal-coverage probability map."""
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(7, 3.2))
    ax0.imshow(np.transpose(image, (1, 2, 0)))
    for x1, y1, x2, y2 in np.asarray(gt_boxes).reshape(-1, 4):
        ax0.add_patch(plt.Rectangle((x1, y1), x2 - x1, y2 - y1,
                                    fill=False, edgecolor="lime", linewidth=1.2))
    ax0.set_title("scene + ground truth")
    ax0.set_axis_off()
    im = ax1.imshow(heatmap, cmap="inferno")
    ax1.set_title(title)
    ax1.set_axis_off()
    fig.colorbar(im, ax=ax1, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_distance_matrix_figure(matrix: np.ndarray, labels: list[str],
                                path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(0.45 * len(labels) + 2, 0.45 * len(labels) + 1.5))
    im = ax.imshow(matrix, cmap="viridis")
    ax.set_xticks(range(len(labels)), labels, rotation=90, fontsize=7)
    ax.set_yticks(range(len(labels)), labels, fontsize=7)
    ax.set_title("pairwise co-excitation distance")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curves(rows: list[dict[str, float]], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r["step"] for r in rows]
    for key in ("total", "lCE", "lMR", "lRPNcls"):
        ax.plot(steps, [r[key] for r in rows], label=key, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ap_bars(per_class: dict[int, float], seen: set[int], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 3))
    ids = sorted(per_class)
    colors = ["tab:blue" if c in seen else "tab:red" for c in ids]
    ax.bar(range(len(ids)), [per_class[c] for c in ids], color=colors)
    ax.set_xticks(range(len(ids)), [str(c) for c in ids], fontsize=7)
    ax.set_xlabel("class id (blue = seen, red = unseen)")
    ax.set_ylabel("AP50")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
