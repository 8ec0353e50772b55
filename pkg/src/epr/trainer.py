"""Online training loops for EPR, its ablations and the replay baselines."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .data import iterate_online
from .memory import (ClassBalancedRing, EpisodicMemory, ReservoirBuffer, RingBuffer, memory_capacity,
                     sample_replay)
from .models import DivergenceError, evaluate, sgd_step
from .packing import PackingConfig, update_memory, update_memory_random
from .patches import MemoryPatch, random_pad, random_place, zero_pad

logger = logging.getLogger(__name__)

METHODS = ("epr", "epr-zero-random", "epr-randpad-exact", "random-snip", "er-ring", "er-reservoir",
           "finetune", "multitask")
PATCH_METHODS = ("epr", "epr-zero-random", "epr-randpad-exact", "random-snip")
STREAMS = ("order", "replay", "transform")


@dataclass
class MethodConfig:
    method: str = "epr"
    lr: float = 0.1
    n_sc: float = 1.0
    epf: int = 2
    stride: int = 1
    batch_size: int = 10
    seed: int = 0
    staging_per_class: Optional[int] = None
    prioritize: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.method in PATCH_METHODS and (self.epf < 1 or self.stride < 1):
            raise ValueError("patch methods need EPF >= 1 and stride >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_sc"] = float(self.n_sc)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MethodConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def seed_streams(seed: int) -> dict:
    """Independent generators per purpose, all derived from one run seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, children)}


def stream_fingerprints(seed: int) -> dict:
    """First draw of each stream, hex-encoded; distinct seeds give distinct fingerprints."""
    return {name: format(int(rng.integers(0, 2 ** 63)), "016x") for name, rng in seed_streams(seed).items()}


@dataclass
class RunResult:
    model: object
    memory: object
    result_matrix: np.ndarray
    timing: list
    losses: list = field(default_factory=list)
    steps: int = 0
    current_examples: int = 0


class TrainingDiverged(DivergenceError):
    def __init__(self, message: str, partial: RunResult):
        super().__init__(message)
        self.partial = partial


def make_memory(cfg: MethodConfig, classes_per_task: int, n_tasks: int):
    if cfg.method in PATCH_METHODS:
        return EpisodicMemory(cfg.epf)
    if cfg.method == "er-ring":
        return ClassBalancedRing(memory_capacity(cfg.n_sc, classes_per_task, n_tasks))
    if cfg.method == "er-reservoir":
        return ReservoirBuffer(memory_capacity(cfg.n_sc, classes_per_task, n_tasks))
    return None


def replay_image(item, method: str, width: int, height: int, rng: np.random.Generator) -> np.ndarray:
    """Full-size replay input for a stored item under a method's pad/place rule."""
    if not isinstance(item, MemoryPatch):
        return item.image
    if method == "epr-zero-random":
        return random_place(item, width, height, rng)
    if method == "epr-randpad-exact":
        return random_pad(item, width, height, rng)
    return zero_pad(item, width, height)


def evaluate_all(model, tasks) -> np.ndarray:
    return np.array([evaluate(model, t) for t in tasks])


def train_continual(tasks, model, cfg: MethodConfig, eval_tasks=None, packing: PackingConfig = None) -> RunResult:
    """Learn ``tasks`` in order, one pass each, with the replay rule of ``cfg.method``.

    After every task the model is evaluated on all of ``eval_tasks``
    (default: ``tasks``), filling one row of the result matrix.
    """
    if cfg.method == "multitask":
        raise ValueError("multitask is not sequential; use train_multitask")
    eval_tasks = tasks if eval_tasks is None else eval_tasks
    height, width, _ = model.input_shape
    cpt = len(tasks[0].label_set)
    rngs = seed_streams(cfg.seed)

    memory = make_memory(cfg, cpt, len(tasks))
    staging = None
    if cfg.method in PATCH_METHODS:
        if packing is None:
            packing = PackingConfig(cfg.n_sc, cfg.epf, cfg.stride, width, cfg.staging_per_class, cfg.prioritize)
        staging = RingBuffer(packing.staging_per_class)

    result = RunResult(model, memory, np.full((len(tasks), len(eval_tasks)), np.nan), [])
    for row, task in enumerate(tasks):
        start = time.perf_counter()
        order_seed = int(rngs["order"].integers(0, 2 ** 31))
        for batch in iterate_online(task, cfg.batch_size, order_seed):
            images, labels, task_ids = batch.images, batch.labels, batch.task_ids
            replay = sample_replay(memory, cfg.batch_size, rngs["replay"]) if memory is not None else []
            if replay:
                extra = np.stack([replay_image(r, cfg.method, height, width, rngs["transform"]) for r in replay])
                images = np.concatenate([images, extra.astype(images.dtype, copy=False)])
                labels = np.concatenate([labels, [r.label for r in replay]])
                task_ids = np.concatenate([task_ids, [r.task_id for r in replay]])
            try:
                loss = sgd_step(model, images, labels, task_ids, cfg.lr)
            except DivergenceError as exc:
                result.timing.append(time.perf_counter() - start)
                raise TrainingDiverged(str(exc), result) from exc
            result.losses.append(loss)
            result.steps += 1
            result.current_examples += len(batch)
            for i in range(len(batch)):
                ex = task.train_example(int(batch.indices[i]))
                if staging is not None:
                    staging.push(ex)
                elif isinstance(memory, ReservoirBuffer):
                    memory.push(ex, rngs["replay"])
                elif memory is not None:
                    memory.push(ex)
        if staging is not None:
            if cfg.method == "random-snip":
                update_memory_random(memory, staging, packing, rngs["transform"], task.label_set)
            else:
                update_memory(memory, staging, model, packing, task.label_set)
            staging.clear()
        result.timing.append(time.perf_counter() - start)
        result.result_matrix[row] = evaluate_all(model, eval_tasks)
        logger.info("%s task %d/%d: acc on seen tasks %.3f", cfg.method, row + 1, len(tasks),
                    result.result_matrix[row, : row + 1].mean())
    return result


def _joint_pass(model, images, labels, task_ids, lr, batch_size, rng):
    order = rng.permutation(len(labels))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        sgd_step(model, images[idx], labels[idx], task_ids[idx], lr)


def train_multitask(tasks, model, lr: float, seed: int, batch_size: int = 10) -> float:
    """Single pass over the shuffled union of all tasks; mean test accuracy."""
    images = np.concatenate([t.train_images for t in tasks])
    labels = np.concatenate([t.train_labels for t in tasks])
    task_ids = np.concatenate([np.full(t.n_train, t.task_id) for t in tasks])
    _joint_pass(model, images, labels, task_ids, lr, batch_size, seed_streams(seed)["order"])
    return float(evaluate_all(model, tasks).mean())


def buffer_informativeness(memory, model, tasks, epochs: int, lr: float, seed: int = 0,
                           batch_size: int = 10) -> float:
    """Train a fresh model jointly on a buffer's contents; mean test accuracy.

    Patches are zero-padded at their stored position.
    """
    items = memory.items() if memory is not None else []
    if not items:
        raise ValueError("buffer is empty")
    height, width, _ = model.input_shape
    images = np.stack([replay_image(it, "epr", height, width, None) for it in items]).astype(np.float32)
    labels = np.array([it.label for it in items])
    task_ids = np.array([it.task_id for it in items])
    rng = seed_streams(seed)["order"]
    for _ in range(epochs):
        _joint_pass(model, images, labels, task_ids, lr, batch_size, rng)
    return float(evaluate_all(model, tasks).mean())


def examples_as_buffer(tasks) -> RingBuffer:
    """Whole training sets as an (unbounded) buffer, for sanity comparisons."""
    biggest = max(t.n_train for t in tasks)
    buf = RingBuffer(biggest)
    for t in tasks:
        for i in range(t.n_train):
            buf.push(t.train_example(i))
    return buf
