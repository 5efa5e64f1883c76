"""Frozen-feature readouts: cosine margin between token classes and a logistic probe."""

from __future__ import annotations

import numpy as np

from .contrast import DegenerateMask
from .numerics import Rng


def cosine_margin(features: np.ndarray, tmask: np.ndarray) -> float:
    """Mean within-class cosine minus mean between-class cosine.

    Within-class is the average of the agent-agent and environment-environment
    means over distinct pairs; a class with a single token contributes no pairs
    and the other class's mean is used alone.
    """
    x = np.asarray(features, dtype=np.float64).reshape(-1, np.shape(features)[-1])
    m = np.asarray(tmask).reshape(-1).astype(bool)
    n_a, n_e = int(m.sum()), int((~m).sum())
    if n_a == 0 or n_e == 0:
        raise DegenerateMask(f"token mask has {n_a} agent tokens out of {m.size}")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = x / np.where(norms == 0, 1.0, norms)
    a, e = x[m], x[~m]

    def within(z):
        n = z.shape[0]
        if n < 2:
            return None
        g = z @ z.T
        return (g.sum() - np.trace(g)) / (n * (n - 1))

    parts = [w for w in (within(a), within(e)) if w is not None]
    between = float((a @ e.T).mean())
    return float(np.mean(parts)) - between


def token_separability(layer_features: list[np.ndarray], tmask: np.ndarray) -> list[float]:
    """Cosine margin for each layer's ``(N, D)`` (or grid-shaped) token features."""
    return [cosine_margin(f, tmask) for f in layer_features]


def _fit_logistic(x: np.ndarray, y: np.ndarray, iters: int, lr: float, l2: float):
    w = np.zeros(x.shape[1])
    b = 0.0
    n = x.shape[0]
    for _ in range(iters):
        z = x @ w + b
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        g = p - y
        w -= lr * (x.T @ g / n + l2 * w)
        b -= lr * g.mean()
    return w, b


def linear_probe(features: np.ndarray, labels: np.ndarray, split_seed: int,
                 train_frac: float = 0.7, balance: bool = True, iters: int = 500,
                 lr: float = 0.5, l2: float = 1e-4) -> float:
    """Held-out accuracy of a logistic classifier on frozen token features.

    With ``balance`` the majority class is subsampled to the minority count
    before splitting, so chance level is 0.5. Features are standardized with
    training-split statistics and the classifier is fit by full-batch gradient
    descent.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).reshape(-1).astype(np.float64)
    if x.shape[0] != y.size:
        raise ValueError(f"{x.shape[0]} feature rows but {y.size} labels")
    rng = Rng(split_seed)
    idx = np.arange(y.size)
    if balance:
        pos, neg = idx[y == 1], idx[y == 0]
        k = min(pos.size, neg.size)
        if k == 0:
            raise ValueError("linear probe needs both classes")
        pos = pos[rng.permutation(pos.size)[:k]]
        neg = neg[rng.permutation(neg.size)[:k]]
        idx = np.sort(np.concatenate([pos, neg]))
    idx = idx[rng.permutation(idx.size)]
    n_train = int(round(train_frac * idx.size))
    tr, te = idx[:n_train], idx[n_train:]
    if np.unique(y[tr]).size < 2:
        raise ValueError("probe training split contains a single class")
    if te.size == 0:
        raise ValueError("probe test split is empty")
    mu = x[tr].mean(axis=0)
    sd = x[tr].std(axis=0)
    sd[sd == 0] = 1.0
    xs = (x - mu) / sd
    w, b = _fit_logistic(xs[tr], y[tr], iters, lr, l2)
    pred = (xs[te] @ w + b) > 0
    return float(np.mean(pred == (y[te] == 1)))
