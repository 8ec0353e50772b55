"""Experience packing: patch sizing, salient-window search and patch selection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .memory import EpisodicMemory, RingBuffer, as_fraction
from .models import predict_topk
from .patches import MemoryPatch, extract_patch, random_snip, zero_pad
from .saliency import SaliencyMap, generate_saliency

logger = logging.getLogger(__name__)

TIERS = ("correct", "top3", "other")


def patch_width(n_sc, epf: int, width: int) -> int:
    """Largest integer side such that ``epf`` patches fit in ``n_sc`` image slots."""
    n_sc = as_fraction(n_sc)
    if int(epf) != epf or epf < 1:
        raise ValueError(f"EPF must be a positive integer, got {epf}")
    if n_sc <= 0 or width < 1:
        raise ValueError("n_sc and width must be positive")
    # floor(sqrt(q)) == isqrt(floor(q)) for q >= 0; exact for rational n_sc
    wp = math.isqrt(math.floor(n_sc * width * width / int(epf)))
    if wp < 1:
        raise ValueError(f"n_sc={n_sc}, EPF={epf}, W={width} gives an empty patch")
    if wp > width:
        raise ValueError(f"n_sc={n_sc}, EPF={epf} gives a patch wider than the image ({wp} > {width})")
    return wp


def epf_of(n_sc, width: int, wp: int) -> Fraction:
    if wp <= 0:
        raise ValueError("patch width must be positive")
    if wp > width:
        raise ValueError("patch wider than image")
    return as_fraction(n_sc) * width * width / (wp * wp)


@dataclass
class PackingConfig:
    n_sc: object
    epf: int
    stride: int
    width: int
    staging_per_class: Optional[int] = None
    prioritize: bool = True

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        self.patch_width = patch_width(self.n_sc, self.epf, self.width)
        if self.staging_per_class is None:
            self.staging_per_class = 2 * self.epf


def pool_positions(size: int, wp: int, stride: int) -> np.ndarray:
    """Window offsets 0, s, 2s, ... plus the last valid offset."""
    last = size - wp
    return np.unique(np.append(np.arange(0, last + 1, stride), last))


def locate_salient_patch(smap, wp: int, stride: int) -> tuple:
    """Top-left corner of the ``wp`` window with the highest mean saliency.

    Windows are visited on a ``stride`` grid; ties go to the smallest (x, y).
    """
    values = np.asarray(smap.values if isinstance(smap, SaliencyMap) else smap, dtype=np.float64)
    w, h = values.shape
    if not 1 <= wp <= min(w, h):
        raise ValueError(f"patch width {wp} does not fit a {w}x{h} map")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    integral = np.zeros((w + 1, h + 1))
    integral[1:, 1:] = values.cumsum(0).cumsum(1)
    xs = pool_positions(w, wp, stride)
    ys = pool_positions(h, wp, stride)
    sums = (integral[xs[:, None] + wp, ys[None, :] + wp] - integral[xs[:, None], ys[None, :] + wp]
            - integral[xs[:, None] + wp, ys[None, :]] + integral[xs[:, None], ys[None, :]])
    means = sums / (wp * wp)
    # cumulative sums round differently per window; treat near-equal means as ties
    best = means.max()
    tol = 1e-12 * max(1.0, abs(best), float(np.abs(values).max()))
    i, j = np.argwhere(means >= best - tol)[0]
    return int(xs[i]), int(ys[j])


def classify_candidate(model, patch: MemoryPatch, task_id: int) -> str:
    """Tier of a patch from the prediction on its zero-padded image."""
    h, w = model.input_shape[:2]
    padded = zero_pad(patch, h, w)
    k = min(3, model.classes_per_task)
    ranked = predict_topk(model, padded, task_id, k)
    if ranked[0] == patch.label:
        return "correct"
    if patch.label in ranked:
        return "top3"
    return "other"


def select_patches(candidates: list, quota: int) -> list:
    """Up to ``quota`` candidates, correct before top3 before other.

    Insertion order is kept within a tier.
    """
    if quota < 0:
        raise ValueError("quota must be non-negative")
    rank = {t: i for i, t in enumerate(TIERS)}
    ordered = sorted(candidates, key=lambda p: rank[p.tier or "other"])
    return ordered[:quota]


def make_candidate(model, example, config: PackingConfig) -> MemoryPatch:
    smap = generate_saliency(model, example.image, example.label, example.task_id)
    wp = config.patch_width
    x, y = locate_salient_patch(smap, wp, config.stride)
    patch = MemoryPatch(extract_patch(example.image, x, y, wp), example.task_id, example.label, x, y,
                        source_box=example.box)
    patch.tier = classify_candidate(model, patch, example.task_id) if config.prioritize else "other"
    return patch


def update_memory(memory: EpisodicMemory, staging: RingBuffer, model, config: PackingConfig,
                  label_set=None) -> EpisodicMemory:
    """Add saliency-selected patches for every class held in ``staging``.

    The caller clears ``staging`` afterwards.
    """
    labels = list(label_set) if label_set is not None else staging.classes()
    for label in labels:
        staged = staging.examples_of(label)
        if not staged:
            logger.warning("no staged images for class %s; it gets no memory patches", label)
            continue
        candidates = [make_candidate(model, ex, config) for ex in staged]
        task_id = staged[0].task_id
        quota = memory.epf - memory.count(task_id, label)
        for patch in select_patches(candidates, quota):
            memory.add(patch)
    return memory


def update_memory_random(memory: EpisodicMemory, staging: RingBuffer, config: PackingConfig,
                         rng: np.random.Generator, label_set=None) -> EpisodicMemory:
    """Random-snip variant: random windows from randomly chosen staged images."""
    labels = list(label_set) if label_set is not None else staging.classes()
    for label in labels:
        staged = staging.examples_of(label)
        if not staged:
            logger.warning("no staged images for class %s; it gets no memory patches", label)
            continue
        quota = memory.epf - memory.count(staged[0].task_id, label)
        chosen = rng.choice(len(staged), size=min(quota, len(staged)), replace=False)
        for i in sorted(chosen):
            ex = staged[i]
            memory.add(random_snip(ex.image, config.patch_width, rng, ex.task_id, ex.label, ex.box))
    return memory
