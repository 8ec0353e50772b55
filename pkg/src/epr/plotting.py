"""Shared matplotlib style for report figures."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PALETTE = {
    "epr": "#1b6ca8",
    "epr-zero-random": "#5fa8d3",
    "epr-randpad-exact": "#9cc5e0",
    "random-snip": "#7a5195",
    "er-ring": "#d1495b",
    "er-reservoir": "#edae49",
    "finetune": "#66a182",
    "multitask": "#2e4057",
}
MARKERS = {"epr": "o", "er-ring": "s", "er-reservoir": "^", "random-snip": "D", "finetune": "v"}

RC = {
    "font.size": 10,
    "axes.labelsize": 11,
    "axes.titlesize": 11,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "legend.fontsize": 9,
    "lines.linewidth": 1.6,
    "lines.markersize": 5,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    # fixed metadata keeps repeated renders byte-stable
    "svg.hashsalt": "epr",
}


def color_for(method: str) -> str:
    return PALETTE.get(method, "#555555")


def get_fig_ax(width: float = 4.5, height: float = None):
    golden = (math.sqrt(5) - 1.0) / 2.0
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(width, height or width * golden))
    return fig, ax


def save_fig(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(RC):
        fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path
