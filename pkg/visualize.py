"""
Static PNG diagnostics: match overlays and co-attention heatmaps.
"""

import logging
import os
from typing import Optional, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from matcher import CorrespondenceSet, attention_heatmap, query_cell  # noqa: E402

logger = logging.getLogger(__name__)

MAX_DRAWN_MATCHES = 300
DPI = 100


def _prepare_dir(path: str):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def save_match_overlay(path: str, image1: np.ndarray, image2: np.ndarray, matches: CorrespondenceSet,
                       max_matches: int = MAX_DRAWN_MATCHES, title: Optional[str] = None) -> str:
    """Side-by-side images with a line per match (the highest-scoring `max_matches`)."""
    _prepare_dir(path)
    h1, w1 = image1.shape[:2]
    h2, w2 = image2.shape[:2]
    canvas = np.ones((max(h1, h2), w1 + w2, 3))
    canvas[:h1, :w1] = image1[..., :3]
    canvas[:h2, w1:] = image2[..., :3]

    shown = matches.subset(np.argsort(-matches.scores, kind="stable")[:max_matches])
    fig, ax = plt.subplots(figsize=(12, 6))
    try:
        ax.imshow(np.clip(canvas, 0.0, 1.0))
        colours = plt.cm.viridis(np.linspace(0.0, 1.0, max(len(shown), 1)))
        for (x1, y1), (x2, y2), colour in zip(shown.p1, shown.p2, colours):
            ax.plot([x1, x2 + w1], [y1, y2], color=colour, linewidth=0.5, alpha=0.7)
        ax.scatter(shown.p1[:, 0], shown.p1[:, 1], s=4, c="red")
        ax.scatter(shown.p2[:, 0] + w1, shown.p2[:, 1], s=4, c="red")
        ax.set_title(title or f"{len(shown)} of {len(matches)} matches")
        ax.axis("off")
        fig.tight_layout()
        fig.savefig(path, dpi=DPI)
    finally:
        plt.close(fig)
    logger.info(f"Saved match overlay to {path}")
    return path


def save_attention_map(path: str, image1: np.ndarray, image2: np.ndarray, A: np.ndarray, point: Tuple[float, float],
                       feature_shape: Tuple[int, int]) -> str:
    """Mark `point` in image 1 and overlay its attention row on image 2."""
    _prepare_dir(path)
    index = query_cell(point, image1.shape[:2], feature_shape)
    heat = attention_heatmap(A, index, feature_shape)
    h2, w2 = image2.shape[:2]

    fig, axes = plt.subplots(1, 2, figsize=(10, 5))
    try:
        axes[0].imshow(np.clip(image1[..., :3], 0.0, 1.0))
        axes[0].scatter([point[0]], [point[1]], s=60, c="red", marker="x")
        axes[0].set_title(f"query ({point[0]:.0f}, {point[1]:.0f}) -> cell {index}")
        axes[1].imshow(np.clip(image2[..., :3], 0.0, 1.0))
        overlay = axes[1].imshow(heat, cmap="jet", alpha=0.5, extent=(-0.5, w2 - 0.5, h2 - 0.5, -0.5),
                                 interpolation="nearest")
        axes[1].set_title("attention over image 2")
        fig.colorbar(overlay, ax=axes[1], fraction=0.046)
        for ax in axes:
            ax.axis("off")
        fig.tight_layout()
        fig.savefig(path, dpi=DPI)
    finally:
        plt.close(fig)
    logger.info(f"Saved attention map to {path}")
    return path
