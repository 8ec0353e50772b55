"""Brute-force reference implementations shared by the unit and acceptance tests.

Everything here is written with plain loops so it shares no code path with
the vectorized library versions.
"""

import math

import numpy as np

from epr.models import TargetCapture

TABLE_ROWS = [
    # (n_sc, EPF, W, W_p)
    (2, 3, 32, 26), (1, 2, 32, 22), (0.75, 1, 32, 27), (0.5, 1, 32, 22),
    (2, 5, 84, 53), (1, 3, 84, 48), (0.75, 2, 84, 51), (0.5, 2, 84, 42),
    (2, 7, 224, 119), (1, 4, 224, 112), (0.75, 3, 224, 112), (0.5, 2, 224, 112),
]


def scan_windows(values, wp, stride):
    """Exhaustive window scan; strict comparison keeps the first maximum."""
    w, h = values.shape
    xs = sorted(set(range(0, w - wp + 1, stride)) | {w - wp})
    ys = sorted(set(range(0, h - wp + 1, stride)) | {h - wp})
    best, where = -np.inf, None
    for x in xs:
        for y in ys:
            m = values[x : x + wp, y : y + wp].sum() / (wp * wp)
            if where is None or m > best + 1e-12 * max(1.0, abs(best)):
                best, where = m, (x, y)
    return where, best


def loop_bilinear(grid, out_w, out_h):
    """Reference resize written pixel by pixel with half-pixel centres."""
    u, v = len(grid), len(grid[0])
    out = [[0.0] * out_h for _ in range(out_w)]
    for i in range(out_w):
        sx = min(max((i + 0.5) * u / out_w - 0.5, 0.0), u - 1)
        x0 = int(math.floor(sx))
        x1 = min(x0 + 1, u - 1)
        ax = sx - x0
        for j in range(out_h):
            sy = min(max((j + 0.5) * v / out_h - 0.5, 0.0), v - 1)
            y0 = int(math.floor(sy))
            y1 = min(y0 + 1, v - 1)
            ay = sy - y0
            out[i][j] = ((1 - ax) * (1 - ay) * grid[x0][y0] + (1 - ax) * ay * grid[x0][y1]
                         + ax * (1 - ay) * grid[x1][y0] + ax * ay * grid[x1][y1])
    return np.array(out)


def loop_gradcam(acts, grads, out_w, out_h):
    m, u, v = acts.shape
    alpha = []
    for k in range(m):
        s = 0.0
        for i in range(u):
            for j in range(v):
                s += grads[k, i, j]
        alpha.append(s / (u * v))
    lmap = [[0.0] * v for _ in range(u)]
    for i in range(u):
        for j in range(v):
            s = 0.0
            for k in range(m):
                s += alpha[k] * acts[k, i, j]
            lmap[i][j] = max(s, 0.0)
    return loop_bilinear(lmap, out_w, out_h)


def random_capture(rng):
    m, u, v = (int(rng.integers(1, 9)) for _ in range(3))
    return TargetCapture(rng.normal(size=(m, u, v)), rng.normal(size=(m, u, v)))


def brute_acc(r):
    t = len(r)
    return sum(r[t - 1][i] for i in range(len(r[0]))) / len(r[0])


def brute_bwt(r, seen_only=True):
    t = len(r)
    total = 0.0
    for i in range(t - 1):
        rows = range(i, t - 1) if seen_only else range(t - 1)
        total += -max(r[l][i] - r[t - 1][i] for l in rows)
    return total / (t - 1)
