"""Inter-token contrastive objective with an analytic backward pass.

Per layer, token features ``fmap`` (``gh x gw x D``) and a 0/1 token mask give
two mean queries (agent, environment). Keys are sampled separately inside the
agent and environment regions. Each query scores its own keys as positives and
the other class's keys as negatives under InfoNCE, and the two terms are added.
Across layers the per-layer losses are fused with ``softmax(gamma * i)``
weights, ``i = 1..L``.

Sampled key indices are discrete and carry no gradient; gradients reach token
features through the query means and through the gathered keys.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import sampler
from .numerics import Rng, softmax

log = logging.getLogger(__name__)


class DegenerateMask(ValueError):
    """A token mask with no agent tokens or no environment tokens."""


@dataclass
class ContrastConfig:
    tau: float = 0.1
    n_agent: int = 10
    n_env: int = 50
    normalize: bool = True
    sampler: str = "fps"
    metric: str = "manhattan"

    def validate(self) -> None:
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.n_agent < 1 or self.n_env < 1:
            raise ValueError("key counts must be at least 1")
        if self.sampler not in ("fps", "random"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.metric not in ("manhattan", "euclidean"):
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass
class MLCConfig:
    gamma: float = 1.0
    enabled: bool = True


def compute_queries(fmap: np.ndarray, tmask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean feature over agent tokens and over environment tokens."""
    feats = fmap.reshape(-1, fmap.shape[-1])
    m = np.asarray(tmask).reshape(-1).astype(bool)
    if feats.shape[0] != m.size:
        raise ValueError(f"feature map has {feats.shape[0]} tokens, mask has {m.size}")
    n_a = int(m.sum())
    if n_a == 0 or n_a == m.size:
        raise DegenerateMask(f"token mask has {n_a} agent tokens out of {m.size}")
    return feats[m].mean(axis=0), feats[~m].mean(axis=0)


def _normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero feature vector")
    return x / norms, norms


def _normalize_backward(xhat: np.ndarray, norms: np.ndarray, g: np.ndarray) -> np.ndarray:
    return (g - xhat * np.sum(g * xhat, axis=-1, keepdims=True)) / norms


def info_nce_grad(q: np.ndarray, pos: np.ndarray, neg: np.ndarray, tau: float,
                  normalize: bool = True):
    """InfoNCE value and gradients ``(loss, dq, dpos, dneg)``.

    ``loss = mean_p [ -s_p + log(exp(s_p) + sum_n exp(s_n)) ]`` with
    ``s = q . k / tau``, evaluated in log-sum-exp form.
    """
    q = np.asarray(q, dtype=np.float64)
    pos = np.atleast_2d(np.asarray(pos, dtype=np.float64))
    neg = np.asarray(neg, dtype=np.float64).reshape(-1, q.shape[-1])
    if pos.shape[0] == 0:
        raise ValueError("InfoNCE needs at least one positive key")
    if not tau > 0:
        raise ValueError("tau must be positive")
    if normalize:
        qh, qn = _normalize_rows(q[None, :])
        qh = qh[0]
        ph, pn = _normalize_rows(pos)
        if neg.shape[0]:
            nh, nn = _normalize_rows(neg)
        else:
            nh, nn = neg, np.ones((0, 1))
    else:
        qh, ph, nh = q, pos, neg
    with np.errstate(over="ignore", invalid="ignore"):
        s_pos = ph @ qh / tau
        s_neg = nh @ qh / tau
    if not (np.all(np.isfinite(s_pos)) and np.all(np.isfinite(s_neg))):
        raise ValueError("non-finite similarity in InfoNCE")
    n_pos = s_pos.shape[0]
    # logits per positive row: [s_p, s_neg...]
    mx = np.maximum(s_pos, s_neg.max() if s_neg.size else -np.inf)
    e_pos = np.exp(s_pos - mx)
    e_neg = np.exp(s_neg[None, :] - mx[:, None])
    z = e_pos + e_neg.sum(axis=1)
    lse = mx + np.log(z)
    loss = float(np.mean(lse - s_pos))

    ds_pos = (e_pos / z - 1.0) / n_pos
    ds_neg = (e_neg / z[:, None]).sum(axis=0) / n_pos
    dqh = (ds_pos @ ph + ds_neg @ nh) / tau
    dph = np.outer(ds_pos, qh) / tau
    dnh = np.outer(ds_neg, qh) / tau
    if normalize:
        dq = _normalize_backward(qh[None, :], qn, dqh[None, :])[0]
        dpos = _normalize_backward(ph, pn, dph)
        dneg = _normalize_backward(nh, nn, dnh) if neg.shape[0] else dnh
    else:
        dq, dpos, dneg = dqh, dph, dnh
    return loss, dq, dpos, dneg


def info_nce(q, pos, neg, tau: float, normalize: bool = True) -> float:
    return info_nce_grad(q, pos, neg, tau, normalize)[0]


@dataclass
class KeyIndices:
    """Flat row-major token indices of the sampled agent and environment keys."""
    agent: np.ndarray
    env: np.ndarray


def sample_keys(tmask: np.ndarray, cfg: ContrastConfig, rng: Rng) -> KeyIndices:
    """Sample agent then environment keys, clamping each count to what is available."""
    m = (np.asarray(tmask) != 0).astype(np.int64)
    n_a = int(m.sum())
    n_e = m.size - n_a
    if n_a == 0 or n_e == 0:
        raise DegenerateMask(f"token mask has {n_a} agent tokens out of {m.size}")
    agent = sampler.sample_flat(m, min(cfg.n_agent, n_a), rng, cfg.sampler, cfg.metric)
    env = sampler.sample_flat(1 - m, min(cfg.n_env, n_e), rng, cfg.sampler, cfg.metric)
    return KeyIndices(agent, env)


def icon_forward_backward(fmap: np.ndarray, tmask: np.ndarray, keys: KeyIndices,
                          cfg: ContrastConfig, want_grad: bool = True):
    """Symmetric ICon loss for one layer with fixed keys; returns ``(loss, dfmap)``."""
    feats = fmap.reshape(-1, fmap.shape[-1])
    m = np.asarray(tmask).reshape(-1).astype(bool)
    q_a, q_e = compute_queries(feats, m)
    k_a, k_e = feats[keys.agent], feats[keys.env]
    la, dqa, dka_pos, dke_neg = info_nce_grad(q_a, k_a, k_e, cfg.tau, cfg.normalize)
    le, dqe, dke_pos, dka_neg = info_nce_grad(q_e, k_e, k_a, cfg.tau, cfg.normalize)
    loss = la + le
    if not want_grad:
        return loss, None
    grad = np.zeros_like(feats)
    grad[m] += dqa / m.sum()
    grad[~m] += dqe / (~m).sum()
    np.add.at(grad, keys.agent, dka_pos + dka_neg)
    np.add.at(grad, keys.env, dke_neg + dke_pos)
    return loss, grad.reshape(fmap.shape)


@dataclass
class IconResult:
    loss: float
    skipped: bool = False
    keys: KeyIndices | None = None


def icon_loss(fmap: np.ndarray, tmask: np.ndarray, cfg: ContrastConfig, rng: Rng) -> IconResult:
    """Single-layer ICon loss; degenerate masks give ``loss=0, skipped=True``."""
    try:
        keys = sample_keys(tmask, cfg, rng)
    except DegenerateMask as exc:
        log.info("skipping ICon term: %s", exc)
        return IconResult(0.0, skipped=True)
    loss, _ = icon_forward_backward(fmap, tmask, keys, cfg, want_grad=False)
    return IconResult(loss, keys=keys)


def layer_weights(n_layers: int, gamma: float) -> np.ndarray:
    """Fusion weights ``softmax(gamma * i)`` for layers ``i = 1..n_layers``."""
    if n_layers < 1:
        raise ValueError("need at least one layer")
    return softmax(np.arange(1, n_layers + 1, dtype=np.float64), gamma)


@dataclass
class MultiLevelResult:
    loss: float
    layer_losses: list[float] = field(default_factory=list)
    weights: np.ndarray | None = None
    keys: list[KeyIndices | None] = field(default_factory=list)
    grid_shape: tuple[int, int] | None = None
    skipped: bool = False


def _active_weights(n_layers: int, mlc: MLCConfig) -> np.ndarray:
    if mlc.enabled:
        return layer_weights(n_layers, mlc.gamma)
    w = np.zeros(n_layers)
    w[-1] = 1.0
    return w


def multi_level_icon(fmaps: list[np.ndarray], tmask: np.ndarray, cfg: ContrastConfig,
                     mlc: MLCConfig, rng: Rng, _keep_grads: bool = False) -> MultiLevelResult:
    """Weighted sum of per-layer ICon losses; keys are re-sampled for every layer.

    Layer ``i`` (1-based) draws from the substream ``rng.spawn(i)``. With MLC
    disabled only the final layer contributes, with weight 1.
    """
    if not fmaps:
        raise ValueError("need at least one layer of features")
    weights = _active_weights(len(fmaps), mlc)
    m = np.asarray(tmask)
    n_a = int((m != 0).sum())
    if n_a == 0 or n_a == m.size:
        log.info("skipping ICon term: %d agent tokens out of %d", n_a, m.size)
        rec = MultiLevelResult(0.0, [0.0] * len(fmaps), weights, [None] * len(fmaps),
                               m.shape, skipped=True)
        if _keep_grads:
            rec._grads = [np.zeros_like(f) for f in fmaps]
        return rec
    losses, keys, grads = [], [], []
    total = 0.0
    for i, fmap in enumerate(fmaps, start=1):
        if fmap.shape[:2] != m.shape:
            raise ValueError(f"layer {i} grid {fmap.shape[:2]} does not match mask {m.shape}")
        if weights[i - 1] == 0.0:
            ks, loss, g = None, 0.0, np.zeros_like(fmap)
        else:
            ks = sample_keys(m, cfg, rng.spawn(i))
            loss, g = icon_forward_backward(fmap, m, ks, cfg, want_grad=_keep_grads)
        losses.append(loss)
        keys.append(ks)
        if _keep_grads:
            grads.append(weights[i - 1] * g)
        total += weights[i - 1] * loss
    rec = MultiLevelResult(total, losses, weights, keys, m.shape)
    if _keep_grads:
        rec._grads = grads
    return rec


def icon_grad(fmaps: list[np.ndarray], tmask: np.ndarray, cfg: ContrastConfig,
              record: MultiLevelResult) -> list[np.ndarray]:
    """Gradient of the fused loss w.r.t. every layer's feature map, reusing recorded keys."""
    if len(fmaps) != len(record.keys):
        raise ValueError(f"record has {len(record.keys)} layers, got {len(fmaps)} feature maps")
    grads = []
    for i, (fmap, ks) in enumerate(zip(fmaps, record.keys)):
        if fmap.shape[:2] != tuple(record.grid_shape):
            raise ValueError(f"layer {i + 1} grid {fmap.shape[:2]} does not match the "
                             f"recorded grid {record.grid_shape}")
        if record.skipped or ks is None:
            grads.append(np.zeros_like(fmap))
            continue
        loss, g = icon_forward_backward(fmap, tmask, ks, cfg)
        grads.append(record.weights[i] * g)
    return grads


def icon_with_keys(fmaps, tmask, cfg: ContrastConfig, record: MultiLevelResult):
    """Re-evaluate the fused loss and gradients on new features with recorded keys."""
    grads = icon_grad(fmaps, tmask, cfg, record)
    if record.skipped:
        return record, grads
    losses = [0.0 if ks is None else icon_forward_backward(f, tmask, ks, cfg, want_grad=False)[0]
              for f, ks in zip(fmaps, record.keys)]
    total = float(sum(w * l for w, l in zip(record.weights, losses)))
    return MultiLevelResult(total, losses, record.weights, record.keys, record.grid_shape), grads


def multi_level_forward_backward(fmaps, tmask, cfg, mlc, rng):
    """Loss record plus per-layer gradients, sampling and differentiating in one pass."""
    rec = multi_level_icon(fmaps, tmask, cfg, mlc, rng, _keep_grads=True)
    grads = rec.__dict__.pop("_grads")
    return rec, grads


def total_loss(task_loss: float, icon: float, lam: float) -> float:
    if not (np.isfinite(task_loss) and np.isfinite(icon)):
        raise ValueError("losses must be finite")
    return task_loss + lam * icon
