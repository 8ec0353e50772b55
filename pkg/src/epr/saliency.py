"""Grad-CAM saliency maps built from a :class:`~epr.models.TargetCapture`."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import TargetCapture, capture_target_layer


@dataclass
class SaliencyMap:
    values: np.ndarray
    source_class: int
    source_task: int


def importance_weights(capture: TargetCapture) -> np.ndarray:
    """Per-feature-map weight: the spatial mean of the score gradient."""
    grads = np.asarray(capture.gradients, dtype=np.float64)
    if grads.shape != np.shape(capture.activations):
        raise ValueError("activation and gradient shapes differ")
    return grads.mean(axis=(1, 2))


def localization_map(alpha, activations) -> np.ndarray:
    """ReLU of the alpha-weighted sum of feature maps, shape (u, v)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    acts = np.asarray(activations, dtype=np.float64)
    if alpha.shape != acts.shape[:1]:
        raise ValueError(f"{len(alpha)} weights for {acts.shape[0]} feature maps")
    return np.maximum(np.tensordot(alpha, acts, axes=1), 0.0)


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, source coordinate clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def upsample_bilinear(grid, width: int, height: int) -> np.ndarray:
    """Bilinearly resize a (u, v) map to (width, height)."""
    grid = np.asarray(grid, dtype=np.float64)
    u, v = grid.shape
    if u < 1 or v < 1:
        raise ValueError("empty map")
    r0, r1, fr = _axis_weights(u, width)
    c0, c1, fc = _axis_weights(v, height)
    top = grid[r0][:, c0] * (1 - fc) + grid[r0][:, c1] * fc
    bottom = grid[r1][:, c0] * (1 - fc) + grid[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def gradcam(capture: TargetCapture, width: int, height: int) -> np.ndarray:
    alpha = importance_weights(capture)
    return upsample_bilinear(localization_map(alpha, capture.activations), width, height)


def generate_saliency(model, image, class_id: int, task_id: int) -> SaliencyMap:
    capture = capture_target_layer(model, image, class_id, task_id)
    h, w = np.shape(image)[:2]
    return SaliencyMap(gradcam(capture, h, w), int(class_id), int(task_id))


def dump_saliency(image, smap: SaliencyMap, out_dir, stem: str) -> Path:
    """Heatmap overlay PNG plus a JSON record with class, task and value range."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, 2, figsize=(4, 2))
    axes[0].imshow(np.clip(image, 0, 1))
    axes[1].imshow(np.clip(image, 0, 1))
    axes[1].imshow(smap.values, cmap="jet", alpha=0.5)
    for ax in axes:
        ax.set_axis_off()
    fig.savefig(out / f"{stem}.png", dpi=100, bbox_inches="tight")
    plt.close(fig)
    record = {
        "class": smap.source_class,
        "task": smap.source_task,
        "min": float(smap.values.min()),
        "max": float(smap.values.max()),
    }
    path = out / f"{stem}.json"
    path.write_text(json.dumps(record, indent=1))
    return path
