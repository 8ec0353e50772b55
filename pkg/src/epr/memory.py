"""Replay buffers: per-class ring staging, episodic patch memory, and the
full-image ring and reservoir buffers used by the experience-replay baselines."""

from __future__ import annotations

from collections import Counter, deque
from fractions import Fraction
from typing import Union

import numpy as np


def as_fraction(value) -> Fraction:
    """Exact rational for ints, Fractions, decimal strings and floats like 0.75."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def memory_capacity(n_sc, classes_per_task: int, n_tasks: int) -> int:
    """Number of full-image slots for ``n_sc`` slots per class.

    Non-integral products are rounded half to even (42.5 -> 42, 63.75 -> 64,
    127.5 -> 128).
    """
    n_sc = as_fraction(n_sc)
    if n_sc <= 0 or classes_per_task <= 0 or n_tasks <= 0:
        raise ValueError("memory_capacity arguments must be positive")
    return round(n_sc * classes_per_task * n_tasks)


def _counts(items) -> dict:
    by_class = Counter(int(e.label) for e in items)
    by_task = Counter(int(e.task_id) for e in items)
    return {
        "total": len(items),
        "per_class": {str(k): v for k, v in sorted(by_class.items())},
        "per_task": {str(k): v for k, v in sorted(by_task.items())},
    }


class RingBuffer:
    """Per-class FIFO queues of fixed length."""

    def __init__(self, capacity_per_class: int):
        if capacity_per_class < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity_per_class = capacity_per_class
        self.queues: dict = {}

    def push(self, example) -> None:
        q = self.queues.setdefault(int(example.label), deque(maxlen=self.capacity_per_class))
        q.append(example)

    def classes(self) -> list:
        return [c for c, q in self.queues.items() if q]

    def examples_of(self, label: int) -> list:
        return list(self.queues.get(int(label), ()))

    def items(self) -> list:
        return [e for q in self.queues.values() for e in q]

    def clear(self) -> None:
        self.queues.clear()

    def __len__(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def snapshot(self) -> dict:
        return _counts(self.items())


class ClassBalancedRing(RingBuffer):
    """Full-image ring memory with a total slot budget split across seen classes.

    Each class gets ``total // classes_seen`` slots. When that is zero,
    the first ``total`` classes to arrive keep one slot each and later
    classes get none.
    """

    def __init__(self, total_capacity: int):
        super().__init__(0)
        self.total_capacity = total_capacity
        self.class_order: list = []

    def _quota(self, label: int) -> int:
        q = self.total_capacity // len(self.class_order)
        if q >= 1:
            return q
        return 1 if self.class_order.index(label) < self.total_capacity else 0

    def push(self, example) -> None:
        label = int(example.label)
        if label not in self.class_order:
            self.class_order.append(label)
            for c in self.class_order:
                old = self.queues.get(c, ())
                self.queues[c] = deque(old, maxlen=self._quota(c))
        self.queues[label].append(example)
        assert len(self) <= self.total_capacity

    def clear(self) -> None:
        super().clear()
        self.class_order.clear()


class ReservoirBuffer:
    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.slots: list = []
        self.seen_count = 0

    def push(self, example, rng: np.random.Generator) -> None:
        self.seen_count += 1
        if len(self.slots) < self.capacity:
            self.slots.append(example)
            return
        j = int(rng.integers(0, self.seen_count))
        if j < self.capacity:
            self.slots[j] = example

    def items(self) -> list:
        return list(self.slots)

    def __len__(self) -> int:
        return len(self.slots)

    def snapshot(self) -> dict:
        return {**_counts(self.slots), "seen_count": self.seen_count}


class EpisodicMemory:
    """Stored memory patches, at most ``epf`` per (task, class)."""

    def __init__(self, epf: int):
        self.epf = epf
        self.patches: list = []
        self._per_class: Counter = Counter()

    def add(self, patch) -> None:
        key = (int(patch.task_id), int(patch.label))
        if self._per_class[key] >= self.epf:
            raise ValueError(f"class {key} already holds {self.epf} patches")
        self._per_class[key] += 1
        self.patches.append(patch)

    def count(self, task_id: int, label: int) -> int:
        return self._per_class[(int(task_id), int(label))]

    def pixel_area(self) -> int:
        return sum(p.width ** 2 for p in self.patches)

    def items(self) -> list:
        return list(self.patches)

    def __len__(self) -> int:
        return len(self.patches)

    def snapshot(self) -> dict:
        return _counts(self.patches)


Buffer = Union[EpisodicMemory, RingBuffer, ReservoirBuffer]


def ring_push(buffer: RingBuffer, example) -> None:
    buffer.push(example)


def reservoir_push(buffer: ReservoirBuffer, example, rng: np.random.Generator) -> None:
    buffer.push(example, rng)


def sample_replay(memory, n: int, rng: np.random.Generator) -> list:
    """Uniform sample of ``n`` stored items.

    Without replacement when enough items exist, otherwise with
    replacement; an empty memory yields an empty list.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if memory is None:
        return []
    items = memory.items()
    if not items:
        return []
    if len(items) >= n:
        idx = rng.choice(len(items), size=n, replace=False)
    else:
        idx = rng.integers(0, len(items), size=n)
    return [items[i] for i in idx]
