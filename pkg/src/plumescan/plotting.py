"""Figure rendering for reports (Agg backend, files only)."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .detector import Instance  # noqa: E402
from .evaluate import MetricsReport  # noqa: E402
from .raster import SceneGrid  # noqa: E402


def _outline(ax, inst, color, lw=1.0):
    r, c, h, w = inst.mask.bbox
    ax.add_patch(plt.Rectangle((c - 0.5, r - 0.5), w, h, fill=False, ec=color, lw=lw))


def plot_scene(scene: SceneGrid, path, detections: Sequence[Instance] = (), truths: Sequence = (),
               title: str = "") -> None:
    """XCH4 panel with truth boxes (white) and detection boxes (red)."""
    fig, ax = plt.subplots(figsize=(7, 6))
    data = np.where(scene.valid, scene.xch4, np.nan)
    lo, hi = np.nanpercentile(data, [1, 99.5])
    im = ax.imshow(data, cmap="viridis", vmin=lo, vmax=hi, interpolation="nearest")
    fig.colorbar(im, ax=ax, label="XCH4 (ppb)")
    for t in truths:
        _outline(ax, t, "white", 1.2)
    for d in detections:
        _outline(ax, d, "red", 0.8)
        r, c, _, _ = d.mask.bbox
        ax.text(c, r - 4, f"{d.score:.2f}", color="red", fontsize=6)
    ax.set_title(title or f"{len(detections)} detections, {len(truths)} labeled plumes")
    ax.set_xlabel("column")
    ax.set_ylabel("row")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_probability(prob: np.ndarray, path) -> None:
    """Grayscale rendering, linear (gamma 1.0), black = 0 and white = 1."""
    plt.imsave(path, np.clip(prob, 0.0, 1.0), cmap="gray", vmin=0.0, vmax=1.0)


def plot_sweep(reports: Sequence[MetricsReport], path) -> None:
    params = sorted({r.param for r in reports})
    fig, axes = plt.subplots(1, len(params), figsize=(4.2 * len(params), 3.4), squeeze=False)
    for ax, param in zip(axes[0], params):
        rows = sorted((r for r in reports if r.param == param), key=lambda r: r.value)
        x = [r.value for r in rows]
        for key, style in (("precision", "o-"), ("recall", "s-"), ("f1", "^-")):
            ax.plot(x, [getattr(r, key) for r in rows], style, ms=3, label=key)
        if all(r.map_at_iou is not None for r in rows):
            ax.plot(x, [r.map_at_iou for r in rows], "d--", ms=3, label="mAP")
        ax.set_xlabel(param)
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("score")
    axes[0][-1].legend(fontsize=7, loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_modes(reports: dict[str, MetricsReport], path) -> None:
    """Grouped bars of precision / recall / F1 per operating mode."""
    modes = list(reports)
    keys = ("precision", "recall", "f1")
    x = np.arange(len(modes))
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for i, key in enumerate(keys):
        ax.bar(x + (i - 1) * 0.26, [getattr(reports[m], key) for m in modes], 0.26, label=key)
    ax.set_xticks(x, [m.replace("_", "\n") for m in modes])
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
