"""Memory patches and the ways they are cut from and placed back into images.

Coordinates follow array slicing: ``x`` indexes rows, ``y`` columns.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class MemoryPatch:
    pixels: np.ndarray
    task_id: int
    label: int
    x_cord: int
    y_cord: int
    tier: Optional[str] = None
    source_box: Optional[tuple] = None

    @property
    def width(self) -> int:
        return self.pixels.shape[0]

    def box(self) -> tuple:
        return (self.x_cord, self.y_cord, self.width, self.width)


def _check_window(x, y, wp, width, height):
    if wp < 1 or not (0 <= x <= width - wp and 0 <= y <= height - wp):
        raise ValueError(f"window ({x}, {y}) of size {wp} does not fit a {width}x{height} image")


def extract_patch(image: np.ndarray, x_cord: int, y_cord: int, wp: int) -> np.ndarray:
    """Copy of the ``wp`` x ``wp`` window at (x_cord, y_cord)."""
    _check_window(x_cord, y_cord, wp, image.shape[0], image.shape[1])
    return image[x_cord : x_cord + wp, y_cord : y_cord + wp].copy()


def _place(background: np.ndarray, pixels: np.ndarray, x: int, y: int) -> np.ndarray:
    wp = pixels.shape[0]
    _check_window(x, y, wp, background.shape[0], background.shape[1])
    background[x : x + wp, y : y + wp] = pixels
    return background


def zero_pad(patch: MemoryPatch, width: int, height: int) -> np.ndarray:
    """Full-size image: zeros except the patch at its stored position."""
    out = np.zeros((width, height, patch.pixels.shape[2]), dtype=patch.pixels.dtype)
    return _place(out, patch.pixels, patch.x_cord, patch.y_cord)


def random_pad(patch: MemoryPatch, width: int, height: int, rng: np.random.Generator) -> np.ndarray:
    """Patch at its stored position on standard-normal noise."""
    out = rng.standard_normal((width, height, patch.pixels.shape[2])).astype(patch.pixels.dtype)
    return _place(out, patch.pixels, patch.x_cord, patch.y_cord)


def random_position(wp: int, width: int, height: int, rng: np.random.Generator) -> tuple:
    return int(rng.integers(0, width - wp + 1)), int(rng.integers(0, height - wp + 1))


def random_place(patch: MemoryPatch, width: int, height: int, rng: np.random.Generator) -> np.ndarray:
    """Zero padding, but at a uniformly random valid position."""
    x, y = random_position(patch.width, width, height, rng)
    out = np.zeros((width, height, patch.pixels.shape[2]), dtype=patch.pixels.dtype)
    return _place(out, patch.pixels, x, y)


def random_snip(image: np.ndarray, wp: int, rng: np.random.Generator, task_id: int = -1,
                label: int = -1, source_box=None) -> MemoryPatch:
    """Uniformly random ``wp`` window of ``image``, kept with its true coordinates."""
    x, y = random_position(wp, image.shape[0], image.shape[1], rng)
    return MemoryPatch(extract_patch(image, x, y, wp), task_id, label, x, y, source_box=source_box)


def box_iou(a, b) -> float:
    """IoU of two ``(x, y, w, h)`` boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union else 0.0
