"""Task streams for online continual learning.

Datasets are held as channels-last float32 arrays in [0, 1]. A stream
partitions the global classes into disjoint tasks; the first ``n_cv``
tasks are reserved for hyperparameter selection and the rest are used
for training and evaluation.
"""

from __future__ import annotations

import json
import logging
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DATASETS = ("synthetic", "cifar-format-dir")


@dataclass(frozen=True)
class Example:
    """One stored item. ``box`` is the ground-truth glyph box for synthetic data."""

    image: np.ndarray
    task_id: int
    label: int
    box: Optional[tuple] = None


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    task_ids: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class TaskDescriptor:
    task_id: int
    label_set: tuple
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    train_boxes: Optional[np.ndarray] = None
    test_boxes: Optional[np.ndarray] = None

    def __post_init__(self):
        allowed = set(self.label_set)
        for labels in (self.train_labels, self.test_labels):
            bad = set(np.unique(labels).tolist()) - allowed
            if bad:
                raise ValueError(f"task {self.task_id}: labels {sorted(bad)} outside label set")

    @property
    def n_train(self) -> int:
        return len(self.train_labels)

    def train_example(self, index: int) -> Example:
        box = None if self.train_boxes is None else tuple(int(v) for v in self.train_boxes[index])
        return Example(self.train_images[index], self.task_id, int(self.train_labels[index]), box)


@dataclass(frozen=True)
class DatasetMeta:
    name: str
    width: int
    height: int
    channels: int
    classes_per_task: int
    n_tasks: int


@dataclass
class TaskStream:
    tasks: list
    n_cv: int
    meta: DatasetMeta
    class_order: tuple = field(default=())

    def __post_init__(self):
        if not 0 <= self.n_cv < len(self.tasks):
            raise ValueError(f"need 0 <= n_cv < T, got n_cv={self.n_cv}, T={len(self.tasks)}")
        seen: set = set()
        for task in self.tasks:
            overlap = seen & set(task.label_set)
            if overlap:
                raise ValueError(f"label sets overlap on {sorted(overlap)}")
            seen |= set(task.label_set)

    @property
    def cv_tasks(self) -> list:
        return self.tasks[: self.n_cv]

    @property
    def eval_tasks(self) -> list:
        return self.tasks[self.n_cv :]


@dataclass
class SyntheticDataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    train_boxes: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    test_boxes: np.ndarray
    n_classes: int
    width: int

    def __len__(self) -> int:
        return len(self.train_labels) + len(self.test_labels)


# --------------------------------------------------------------------------
# synthetic glyphs


def _shape_masks(size: int) -> list:
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    r, s = np.meshgrid(c, c, indexing="ij")
    rad = np.hypot(r, s)
    cheb = np.maximum(np.abs(r), np.abs(s))
    masks = [
        rad < 0.85,
        (rad > 0.45) & (rad < 0.95),
        (cheb > 0.55) & (cheb < 0.98),
        (np.abs(r) < 0.28) | (np.abs(s) < 0.28),
        np.abs(np.abs(r) - np.abs(s)) < 0.3,
        (r > -0.9) & (np.abs(s) < (r + 0.9) / 1.9),
        np.abs(r) + np.abs(s) < 0.95,
        np.floor((r + 1.0) * 2.5).astype(int) % 2 == 0,
        np.floor((s + 1.0) * 2.5).astype(int) % 2 == 0,
        (np.floor((r + 1.0) * 1.5).astype(int) + np.floor((s + 1.0) * 1.5).astype(int)) % 2 == 0,
    ]
    return masks


# every colour has one saturated channel; background noise stays below it
_PALETTE = np.array(
    [
        [1.0, 0.15, 0.15],
        [0.15, 1.0, 0.15],
        [0.2, 0.3, 1.0],
        [1.0, 1.0, 0.1],
        [1.0, 0.1, 1.0],
        [0.1, 1.0, 1.0],
        [1.0, 1.0, 1.0],
        [1.0, 0.55, 0.0],
    ],
    dtype=np.float32,
)
BACKGROUND_MAX = 0.5


@dataclass(frozen=True)
class GlyphStyle:
    """Rendering knobs for the synthetic glyph images.

    ``alpha`` blends the glyph colour over the background noise,
    ``brightness_jitter`` scales each glyph colour by a factor drawn from
    ``[1 - jitter, 1]`` and ``rotate`` turns each glyph by a random
    multiple of 90 degrees.
    """

    background_max: float = BACKGROUND_MAX
    alpha: float = 1.0
    brightness_jitter: float = 0.0
    rotate: bool = False

    def __post_init__(self):
        if not 0 <= self.background_max <= 1 or not 0 < self.alpha <= 1 or not 0 <= self.brightness_jitter < 1:
            raise ValueError(f"invalid glyph style {self}")

    @classmethod
    def from_dict(cls, d) -> "GlyphStyle":
        return d if isinstance(d, GlyphStyle) else cls(**(d or {}))


def glyph_identity(label: int) -> tuple:
    """(shape index, colour index) of a class; unique for the first 80 classes."""
    a, b = divmod(label, 10)
    return b, (11 * a + b) % len(_PALETTE)


def _render(labels, width, rng, style: GlyphStyle = GlyphStyle()):
    side = width // 2
    masks = _shape_masks(side)
    n = len(labels)
    images = rng.uniform(0.0, style.background_max, size=(n, width, width, 3)).astype(np.float32)
    boxes = np.zeros((n, 4), dtype=np.int64)
    corners = rng.integers(0, width - side + 1, size=(n, 2))
    for i, label in enumerate(labels):
        shape, colour = glyph_identity(int(label))
        x, y = corners[i]
        mask = masks[shape]
        if style.rotate:
            mask = np.rot90(mask, int(rng.integers(0, 4)))
        tint = _PALETTE[colour]
        if style.brightness_jitter:
            tint = tint * (1 - style.brightness_jitter * rng.uniform())
        region = images[i, x : x + side, y : y + side]
        region[mask] = (1 - style.alpha) * region[mask] + style.alpha * tint
        boxes[i] = (x, y, side, side)
    return images, boxes


def generate_synthetic_dataset(
    n_classes: int, per_class_train: int, per_class_test: int, width: int, seed: int, style=None
) -> SyntheticDataset:
    """Noise images each carrying one class-specific glyph in a ``width/2`` square.

    Boxes are ``(x, y, w, h)`` with ``x`` the row and ``y`` the column of the
    top-left corner.
    """
    if width < 16:
        raise ValueError(f"width must be >= 16, got {width}")
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if n_classes > 80:
        raise ValueError("synthetic glyphs are unique for at most 80 classes")
    style = GlyphStyle.from_dict(style)
    rng = np.random.default_rng(seed)
    train_labels = np.repeat(np.arange(n_classes), per_class_train)
    test_labels = np.repeat(np.arange(n_classes), per_class_test)
    train_images, train_boxes = _render(train_labels, width, rng, style)
    test_images, test_boxes = _render(test_labels, width, rng, style)
    return SyntheticDataset(
        train_images, train_labels, train_boxes, test_images, test_labels, test_boxes, n_classes, width
    )


# --------------------------------------------------------------------------
# CIFAR-100 on disk


def load_cifar100(path) -> tuple:
    """Read CIFAR-100 from the python-pickle or binary distribution layout.

    Returns ``(train_x, train_y, test_x, test_y)`` with images as
    ``(N, 32, 32, 3)`` float32 in [0, 1] and fine labels.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"CIFAR directory not found: {root}")
    for candidate in (root, root / "cifar-100-python", root / "cifar-100-binary"):
        if (candidate / "train").is_file() and (candidate / "test").is_file():
            return (*_read_pickle(candidate / "train"), *_read_pickle(candidate / "test"))
        if (candidate / "train.bin").is_file() and (candidate / "test.bin").is_file():
            return (*_read_binary(candidate / "train.bin"), *_read_binary(candidate / "test.bin"))
    raise FileNotFoundError(f"no CIFAR-100 train/test files under {root}")


def _planar_to_hwc(flat: np.ndarray) -> np.ndarray:
    images = flat.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images, dtype=np.float32) / 255.0


def _read_pickle(path: Path):
    with open(path, "rb") as fh:
        entry = pickle.load(fh, encoding="bytes")
    data = entry.get(b"data", entry.get("data"))
    labels = entry.get(b"fine_labels", entry.get("fine_labels"))
    return _planar_to_hwc(np.asarray(data, dtype=np.uint8)), np.asarray(labels, dtype=np.int64)


def _read_binary(path: Path):
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, 2 + 3072)
    return _planar_to_hwc(raw[:, 2:]), raw[:, 1].astype(np.int64)


# --------------------------------------------------------------------------
# streams


def class_permutation(n_classes: int, seed: int) -> np.ndarray:
    """Seed 0 keeps the canonical class order; other seeds shuffle it."""
    if seed == 0:
        return np.arange(n_classes)
    return np.random.default_rng(seed).permutation(n_classes)


def build_split_stream(
    dataset_id: str,
    n_tasks: int,
    classes_per_task: int,
    seed: int,
    *,
    n_cv: int = 0,
    data_dir=None,
    dataset: Optional[SyntheticDataset] = None,
    per_class_train: int = 250,
    per_class_test: int = 50,
    width: int = 32,
    data_seed: int = 0,
    style=None,
) -> TaskStream:
    """Partition a dataset's classes into ``n_tasks`` disjoint tasks.

    Classes are permuted by ``seed`` and chunked contiguously. For the
    synthetic dataset, images are generated once from ``data_seed`` (or
    taken from ``dataset``) so that only the task assignment depends on
    ``seed``.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    if n_tasks < 1 or classes_per_task < 1:
        raise ValueError("n_tasks and classes_per_task must be positive")
    needed = n_tasks * classes_per_task

    boxes = (None, None)
    if dataset_id == "synthetic":
        if dataset is None:
            dataset = generate_synthetic_dataset(needed, per_class_train, per_class_test, width, data_seed, style)
        train_x, train_y, test_x, test_y = (
            dataset.train_images,
            dataset.train_labels,
            dataset.test_images,
            dataset.test_labels,
        )
        boxes = (dataset.train_boxes, dataset.test_boxes)
        n_classes = dataset.n_classes
    elif dataset_id == "cifar-format-dir":
        if data_dir is None:
            raise ValueError("cifar-format-dir requires data_dir")
        train_x, train_y, test_x, test_y = load_cifar100(data_dir)
        n_classes = int(max(train_y.max(), test_y.max())) + 1
    else:
        raise ValueError(f"unknown dataset {dataset_id!r}; expected one of {DATASETS}")

    if n_classes < needed:
        raise ValueError(f"dataset has {n_classes} classes, need {n_tasks} x {classes_per_task} = {needed}")

    order = class_permutation(n_classes, seed)[:needed]
    tasks = []
    for t in range(n_tasks):
        label_set = tuple(int(c) for c in order[t * classes_per_task : (t + 1) * classes_per_task])
        tr = np.flatnonzero(np.isin(train_y, label_set))
        te = np.flatnonzero(np.isin(test_y, label_set))
        tasks.append(
            TaskDescriptor(
                task_id=t,
                label_set=label_set,
                train_images=train_x[tr],
                train_labels=train_y[tr],
                test_images=test_x[te],
                test_labels=test_y[te],
                train_boxes=None if boxes[0] is None else boxes[0][tr],
                test_boxes=None if boxes[1] is None else boxes[1][te],
            )
        )
    h, w, c = train_x.shape[1:]
    meta = DatasetMeta(dataset_id, w, h, c, classes_per_task, n_tasks)
    return TaskStream(tasks, n_cv, meta, tuple(int(c) for c in order))


def split_cross_validation(stream: TaskStream, k: int) -> tuple:
    """First ``k`` tasks for hyperparameter search, the rest for evaluation."""
    n = len(stream.tasks)
    if not 0 < k < n:
        raise ValueError(f"need 0 < K < T, got K={k}, T={n}")
    return list(stream.tasks[:k]), list(stream.tasks[k:])


def iterate_online(task: TaskDescriptor, batch_size: int, seed: int) -> Iterator[Batch]:
    """Single pass over a task's training set in a seeded random order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if task.n_train == 0:
        raise ValueError(f"task {task.task_id} has no training examples")
    order = np.random.default_rng(seed).permutation(task.n_train)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield Batch(
            images=task.train_images[idx],
            labels=task.train_labels[idx],
            task_ids=np.full(len(idx), task.task_id, dtype=np.int64),
            indices=idx,
        )


def export_synthetic(stream: TaskStream, out_dir, split: str = "train", limit: Optional[int] = None) -> Path:
    """Write stream images as PNG files plus ``manifest.json``.

    Each manifest entry has the image path, label, task and ground-truth
    box ``[x, y, w, h]`` (x is the row).
    """
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for task in stream.tasks:
        images = task.train_images if split == "train" else task.test_images
        labels = task.train_labels if split == "train" else task.test_labels
        boxes = task.train_boxes if split == "train" else task.test_boxes
        n = len(labels) if limit is None else min(limit, len(labels))
        for i in range(n):
            rel = f"images/{split}_t{task.task_id:02d}_{i:05d}.png"
            Image.fromarray(np.round(images[i] * 255).astype(np.uint8)).save(out / rel)
            records.append(
                {
                    "path": rel,
                    "label": int(labels[i]),
                    "task": int(task.task_id),
                    "box": None if boxes is None else [int(v) for v in boxes[i]],
                }
            )
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"split": split, "images": records}, indent=1))
    return manifest


def check_images(images: np.ndarray, meta: DatasetMeta) -> None:
    expected = (meta.height, meta.width, meta.channels)
    if images.shape[1:] != expected:
        raise ValueError(f"image shape {images.shape[1:]} does not match dataset {expected}")


def stack_examples(examples: Sequence[Example]) -> Batch:
    return Batch(
        images=np.stack([e.image for e in examples]).astype(np.float32, copy=False),
        labels=np.array([e.label for e in examples], dtype=np.int64),
        task_ids=np.array([e.task_id for e in examples], dtype=np.int64),
        indices=np.arange(len(examples)),
    )
