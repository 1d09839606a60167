"""Figure rendering.  Everything draws off-screen and writes files:
PR curves, training-loss curves, and confidence heatmap overlays.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn.functional as F  # noqa: E402

from .head import HeadOutput  # noqa: E402


def plot_pr_curve(points: Sequence[tuple[float, float]], path,
                  title: str = "Precision vs. recall") -> Path:
    """Render (recall, precision) points as a step curve PNG."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 5))
    if points:
        recalls = [r for r, _ in points]
        precisions = [p for _, p in points]
        ax.plot(recalls, precisions, drawstyle="steps-post", color="tab:blue")
        ax.scatter(recalls, precisions, s=8, color="tab:blue")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(title)
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_curves(rows: Sequence[dict], path,
                     keys: Sequence[str] = ("total", "reg", "cls", "obj")
                     ) -> Path:
    """Render per-step loss components from training-log rows."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [int(float(row["step"])) for row in rows]
    for key in keys:
        if rows and key in rows[0]:
            ax.plot(steps, [float(row[key]) for row in rows], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("Training loss")
    ax.grid(True, alpha=0.3)
    if rows:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def confidence_map(output: HeadOutput) -> torch.Tensor:
    """Objectness times best class score per cell: (h, w) in [0, 1]."""
    if output.batched:
        raise ValueError("pass a single sample (use .sample(i) on batches)")
    obj = torch.sigmoid(output.obj.detach())[0]
    cls = torch.sigmoid(output.cls.detach()).max(dim=0).values
    return obj * cls


def heatmap_overlay(output: HeadOutput, image: np.ndarray,
                    alpha: float = 0.5) -> np.ndarray:
    """Blend the confidence map over an image.

    `image` is (3, H, W) float in [0, 1]; the result is (H, W, 3) uint8
    with warm colors where confidence is high.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(
            f"expected a (3, H, W) image, got shape {image.shape}"
        )
    height, width = image.shape[1:]
    conf = confidence_map(output)
    scaled = F.interpolate(conf[None, None].float(), size=(height, width),
                           mode="bilinear", align_corners=False)[0, 0]
    heat = plt.get_cmap("turbo")(scaled.numpy())[..., :3]
    base = np.clip(image.transpose(1, 2, 0), 0.0, 1.0)
    blended = (1 - alpha) * base + alpha * heat
    return (np.clip(blended, 0.0, 1.0) * 255).round().astype(np.uint8)


def render_heatmap(output: HeadOutput, image: np.ndarray, path,
                   alpha: float = 0.5) -> Path:
    """Write the blended heatmap as a PNG and return the path."""
    from PIL import Image

    path = Path(path)
    Image.fromarray(heatmap_overlay(output, image, alpha)).save(path)
    return path
