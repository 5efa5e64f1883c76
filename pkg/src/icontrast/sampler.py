"""Key selection on token grids.

Grid indices are 0-based ``(row, col)`` tuples. Farthest point sampling keeps a
running minimum distance to the selected set and only compares against the most
recent pick each round; :func:`fps_oracle` recomputes against every pick and is
used to check that the two agree.

Ties in the argmax go to the first cell in row-major order.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Literal

import numpy as np

from .numerics import Rng

GridIndex = tuple[int, int]
Metric = Literal["manhattan", "euclidean"]


def _as_mask(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {m.shape}")
    return (m != 0).astype(np.int64)


def _check_count(m: np.ndarray, n: int) -> int:
    pop = int(m.sum())
    if n < 1:
        raise ValueError("number of samples must be at least 1")
    if pop == 0:
        raise ValueError("cannot sample from an empty mask")
    if n > pop:
        raise ValueError(f"requested {n} samples but the mask has only {pop} cells")
    return pop


def _distance(rows, cols, k, l, metric: Metric):
    if metric == "manhattan":
        return np.abs(rows - k) + np.abs(cols - l)
    if metric == "euclidean":
        return np.sqrt((rows - k) ** 2 + (cols - l) ** 2)
    raise ValueError(f"unknown distance metric {metric!r}")


@lru_cache(maxsize=32)
def _distance_table(h: int, w: int, metric: Metric) -> np.ndarray:
    """All-pairs cell distances, row ``i`` = distances from flat cell ``i``."""
    rows, cols = np.divmod(np.arange(h * w), w)
    table = _distance(rows[None, :], cols[None, :], rows[:, None], cols[:, None], metric)
    table.flags.writeable = False
    return table


def fps_flat(m: np.ndarray, n: int, start: int, metric: Metric = "manhattan") -> np.ndarray:
    """Incremental FPS on a 0/1 int mask; ``start`` and the result are flat row-major indices."""
    h, w = m.shape
    table = _distance_table(h, w, metric)
    flat_m = m.reshape(-1)
    dist = np.full(h * w, np.inf)
    picks = np.empty(n, dtype=np.int64)
    picks[0] = start
    last = start
    for s in range(1, n):
        np.minimum(dist, table[last], out=dist)
        last = int(np.argmax(flat_m * dist))
        picks[s] = last
    return picks


def _random_start(m: np.ndarray, rng: Rng) -> int:
    cells = np.flatnonzero(m.reshape(-1))
    return int(cells[rng.randbelow(cells.size)])


def fps2d(mask, n: int, rng: Rng | None = None, start: GridIndex | None = None,
          metric: Metric = "manhattan") -> list[GridIndex]:
    """2D farthest point sampling inside ``mask``.

    The first pick is uniform over the masked cells (drawn from ``rng``) unless a
    fixed ``start`` is given. Each later pick maximizes ``mask * d`` where ``d``
    is the minimum distance to the picks so far.
    """
    m = _as_mask(mask)
    _check_count(m, n)
    w = m.shape[1]
    if start is None:
        if rng is None:
            raise ValueError("fps2d needs either rng or a fixed start")
        s = _random_start(m, rng)
    else:
        if not m[start]:
            raise ValueError(f"start {start} lies outside the mask")
        s = start[0] * w + start[1]
    return [divmod(int(i), w) for i in fps_flat(m, n, s, metric)]


def fps_oracle(mask, n: int, start: GridIndex, metric: Metric = "manhattan") -> list[GridIndex]:
    """Reference FPS: recompute each cell's distance to all picks every round."""
    m = _as_mask(mask)
    _check_count(m, n)
    if not m[start]:
        raise ValueError(f"start {start} lies outside the mask")
    h, w = m.shape
    picks = [tuple(start)]
    for _ in range(n - 1):
        best, best_score = None, -1.0
        for k in range(h):
            for l in range(w):
                if not m[k, l]:
                    score = 0.0
                else:
                    score = min(float(_distance(k, l, pk, pl, metric)) for pk, pl in picks)
                if score > best_score:
                    best, best_score = (k, l), score
        picks.append(best)
    return picks


def random_flat(m: np.ndarray, n: int, rng: Rng) -> np.ndarray:
    """``n`` distinct masked flat indices, uniform without replacement.

    Every masked cell gets one 64-bit key from ``rng``; the ``n`` smallest keys win.
    """
    cells = np.flatnonzero(m.reshape(-1))
    keys = rng.u64_array(cells.size)
    order = np.argsort(keys, kind="stable")[:n]
    return cells[order]


def random_sample(mask, n: int, rng: Rng) -> list[GridIndex]:
    m = _as_mask(mask)
    _check_count(m, n)
    w = m.shape[1]
    return [divmod(int(i), w) for i in random_flat(m, n, rng)]


def sample_flat(m: np.ndarray, n: int, rng: Rng, method: str = "fps",
                metric: Metric = "manhattan") -> np.ndarray:
    """Dispatch used by the contrastive loss; ``m`` is a 0/1 int grid."""
    _check_count(m, n)
    if method == "fps":
        return fps_flat(m, n, _random_start(m, rng), metric)
    if method == "random":
        return random_flat(m, n, rng)
    raise ValueError(f"unknown sampler {method!r}")


def min_pairwise_manhattan(points: list[GridIndex]) -> int:
    best = None
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            d = abs(points[i][0] - points[j][0]) + abs(points[i][1] - points[j][1])
            best = d if best is None else min(best, d)
    return 0 if best is None else best
