"""Average accuracy and backward transfer over a result matrix."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class ResultMatrix:
    """``values[l, i]``: test accuracy on task ``i`` after training through task ``l``."""

    values: np.ndarray
    seed: int = 0
    method: str = ""

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in self.values:
                writer.writerow([repr(float(v)) for v in row])
        return path

    @classmethod
    def from_csv(cls, path, seed: int = 0, method: str = "") -> "ResultMatrix":
        with open(path, newline="") as fh:
            rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
        return cls(np.array(rows, dtype=np.float64), seed, method)


def _values(r) -> np.ndarray:
    return np.asarray(r.values if isinstance(r, ResultMatrix) else r, dtype=np.float64)


def acc_metric(r) -> float:
    """Mean accuracy over all tasks after the final task."""
    values = _values(r)
    if values.ndim != 2 or values.shape[0] == 0:
        raise ValueError("result matrix must be 2-D and non-empty")
    last = values[-1]
    if np.isnan(last).any():
        raise ValueError("final row of the result matrix is incomplete")
    return float(last.mean())


def bwt_metric(r, seen_only: bool = True) -> float:
    """Backward transfer: mean over old tasks of minus their largest drop.

    For task ``i`` the drop is ``max_l (R[l, i] - R[T, i])`` over rows
    ``l < T``; with ``seen_only`` only rows at or after task ``i`` was
    learned count.
    """
    values = _values(r)
    n = values.shape[0]
    if n < 2:
        raise ValueError("BWT needs at least two tasks")
    if values.shape[1] < n:
        raise ValueError("result matrix has fewer columns than rows")
    lower = np.tril(np.ones((n, n), dtype=bool))
    if np.isnan(values[:, :n][lower]).any():
        raise ValueError("result matrix is incomplete")
    final = values[-1, : n - 1]
    prior = values[: n - 1, : n - 1]
    if seen_only:
        prior = np.where(np.tril(np.ones((n - 1, n - 1), dtype=bool)), prior, -np.inf)
    return float(-(prior - final).max(axis=0).mean())
