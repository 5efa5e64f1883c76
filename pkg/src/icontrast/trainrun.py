"""End-to-end training with the task + lambda * ICon objective, evaluation and exports.

The task loss is a proxy: a linear head on the final-layer [CLS] feature
regresses the agent centroid (in crop coordinates, measured in token-grid
units), scored by mean squared error. Per step the batch is randomly cropped
(image and mask share the window), encoded once, and the multi-level
contrastive loss is averaged over the samples whose token mask holds both
classes.

Randomness is split into independent substreams so that disabling the
contrastive term never changes data order, crops, or initialization:

* ``derive_seed(seed, 0)``                     parameter init
* ``derive_seed(seed, 1, epoch)``              batch order and crop offsets
* ``derive_seed(seed, 2, epoch, step, j)``     key sampling for batch slot ``j``
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import contrast, vit
from .contrast import ContrastConfig, MLCConfig
from .evalmetrics import cosine_margin, linear_probe
from .maskgrid import center_crop_pair, random_crop_pair, token_mask
from .numerics import Rng, derive_seed
from .synthworld import SceneArrays, load_dataset

log = logging.getLogger(__name__)

TIMING_FIELDS = ("wall_time",)


@dataclass
class TrainConfig:
    vit: vit.ViTConfig = field(default_factory=vit.ViTConfig)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    mlc: MLCConfig = field(default_factory=MLCConfig)
    lam: float = 1.0
    beta: float = 0.5
    eval_beta: float = 0.5
    lr: float = 3e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 30
    crop_h: int = 56
    crop_w: int = 56
    seed: int = 0
    init_std: float = 0.02
    icon_enabled: bool = True
    target_units: str = "tokens"  # centroid target in token-grid units ("tokens") or [0, 1] ("unit")
    eval_samples: int = 32
    probe_seed: int = 0
    threads: int = 1
    dataset: str = ""
    checkpoint: str = ""
    metrics: str = ""

    def validate(self) -> None:
        self.vit.validate()
        self.contrast.validate()
        if (self.crop_h, self.crop_w) != (self.vit.height, self.vit.width):
            raise ValueError(f"crop {self.crop_h}x{self.crop_w} must equal the ViT input "
                             f"{self.vit.height}x{self.vit.width}")
        if self.crop_h % self.vit.patch or self.crop_w % self.vit.patch:
            raise ValueError(f"crop dims must be multiples of the patch size {self.vit.patch}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        for name in ("beta", "eval_beta"):
            b = getattr(self, name)
            if not 0.0 <= b <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {b}")
            if b == 1.0:
                log.warning("%s = 1 yields all-environment token masks (strict threshold)", name)
        if self.target_units not in ("tokens", "unit"):
            raise ValueError(f"target_units must be 'tokens' or 'unit', got {self.target_units!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_dict(cls, d)


_NESTED = {"vit": vit.ViTConfig, "contrast": ContrastConfig, "mlc": MLCConfig}


def _from_dict(cls, d: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {}
    for key, value in d.items():
        if cls is TrainConfig and key in _NESTED:
            kwargs[key] = _from_dict(_NESTED[key], value)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def load_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return TrainConfig.from_dict(json.load(fh))


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


@dataclass
class AdamHyper:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: dict) -> AdamState:
    return AdamState({k: np.zeros_like(v) for k, v in params.items()},
                     {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, hyper: AdamHyper) -> None:
    """In-place Adam update with bias correction.

    ``m = b1 m + (1-b1) g``, ``v = b2 v + (1-b2) g^2``,
    ``p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape "
                             f"{params[name].shape} for {name}")
    state.t += 1
    c1 = 1.0 - hyper.beta1 ** state.t
    c2 = 1.0 - hyper.beta2 ** state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * g * g
        params[name] -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)


# ---------------------------------------------------------------- model

def init_model(cfg: TrainConfig) -> dict[str, np.ndarray]:
    rng = Rng(derive_seed(cfg.seed, 0))
    params = vit.init_params(cfg.vit, rng, cfg.init_std)
    params["head_w"] = rng.normal_array((cfg.vit.dim, 2), cfg.init_std)
    params["head_b"] = np.zeros(2)
    return params


def _encoder_params(params: dict) -> dict:
    return {k: v for k, v in params.items() if not k.startswith("head_")}


@dataclass
class StepResult:
    task_loss: float
    icon_loss: float
    icon_layers: list[float]
    total_loss: float
    degenerate: int
    grads: dict
    records: list = field(default_factory=list)


def _icon_one(args):
    fmaps, tmask, ccfg, mlc, seed = args
    return contrast.multi_level_forward_backward(fmaps, tmask, ccfg, mlc, Rng(seed))


def loss_and_grads(params: dict, images: np.ndarray, tmasks: list[np.ndarray],
                   targets: np.ndarray, cfg: TrainConfig, icon_seeds: list[int],
                   keys: list | None = None, threads: int = 1) -> StepResult:
    """Objective and gradients for one batch.

    ``keys`` optionally supplies per-sample :class:`MultiLevelResult` records
    whose sampled indices are reused instead of drawing new ones.
    """
    rec = vit.vit_forward(images, params, cfg.vit)
    b = images.shape[0]
    f_cls = rec.outputs[-1][:, 0]
    pred = f_cls @ params["head_w"] + params["head_b"]
    resid = pred - targets
    task = float(np.mean(resid * resid))
    dpred = 2.0 * resid / resid.size

    n_layers = cfg.vit.layers
    token_grads = [np.zeros((b, cfg.vit.n_tokens, cfg.vit.dim)) for _ in range(n_layers)]
    icon_total, icon_layers, valid = 0.0, np.zeros(n_layers), 0
    records = []
    if cfg.icon_enabled:
        if keys is None:
            jobs = [(rec.feature_maps(j), tmasks[j], cfg.contrast, cfg.mlc, icon_seeds[j])
                    for j in range(b)]
            if threads > 1:
                with ThreadPoolExecutor(threads) as pool:
                    results = list(pool.map(_icon_one, jobs))
            else:
                results = [_icon_one(job) for job in jobs]
        else:
            results = []
            for j in range(b):
                fm = rec.feature_maps(j)
                results.append(contrast.icon_with_keys(fm, tmasks[j], cfg.contrast, keys[j]))
        valid = sum(not r.skipped for r, _ in results)
        for j, (r, grads) in enumerate(results):
            records.append(r)
            if r.skipped:
                continue
            icon_total += r.loss / valid
            icon_layers += np.asarray(r.layer_losses) / valid
            for i in range(n_layers):
                token_grads[i][j] = grads[i].reshape(cfg.vit.n_tokens, -1) * (cfg.lam / valid)
    total = contrast.total_loss(task, icon_total, cfg.lam)
    if not np.isfinite(total):
        raise FloatingPointError("non-finite loss")

    cls_grad = dpred @ params["head_w"].T
    grads = vit.vit_backward(token_grads, cls_grad, rec, _encoder_params(params))
    grads["head_w"] = f_cls.T @ dpred
    grads["head_b"] = dpred.sum(axis=0)
    degenerate = b - valid if cfg.icon_enabled else 0
    return StepResult(task, icon_total, icon_layers.tolist(), total, degenerate, grads, records)


def objective_with_keys(params: dict, images: np.ndarray, tmasks: list[np.ndarray],
                        targets: np.ndarray, cfg: TrainConfig, keys: list) -> float:
    """Total loss only (no backward pass) with keys fixed by earlier records.

    Matches ``loss_and_grads(..., keys=keys).total_loss``; used for finite differences.
    """
    rec = vit.vit_forward(images, params, cfg.vit)
    pred = rec.outputs[-1][:, 0] @ params["head_w"] + params["head_b"]
    task = float(np.mean((pred - targets) ** 2))
    icon_total = 0.0
    if cfg.icon_enabled:
        valid = [j for j, r in enumerate(keys) if not r.skipped]
        for j in valid:
            fmaps = rec.feature_maps(j)
            r = keys[j]
            loss = sum(w * contrast.icon_forward_backward(f, tmasks[j], ks, cfg.contrast,
                                                          want_grad=False)[0]
                       for f, ks, w in zip(fmaps, r.keys, r.weights) if ks is not None)
            icon_total += float(loss) / len(valid)
    return contrast.total_loss(task, icon_total, cfg.lam)


# ---------------------------------------------------------------- data handling

def crop_batch(data: SceneArrays, idx, cfg: TrainConfig, rng: Rng | None):
    """Crop a batch (random if ``rng`` is given, else centered) and build targets.

    Targets are the stored centroid moved into crop coordinates, scaled to
    token-grid units unless ``cfg.target_units == "unit"``.
    """
    images, tmasks, targets = [], [], []
    h, w = data.images.shape[1:3]
    if cfg.target_units == "tokens":
        sx, sy = cfg.crop_w / cfg.vit.patch, cfg.crop_h / cfg.vit.patch
    else:
        sx = sy = 1.0
    for i in idx:
        if rng is None:
            im, m, (top, left) = center_crop_pair(data.images[i], data.masks[i], cfg.crop_h, cfg.crop_w)
        else:
            im, m, (top, left) = random_crop_pair(data.images[i], data.masks[i], cfg.crop_h, cfg.crop_w, rng)
        images.append(im.astype(np.float64) / 255.0)
        tmasks.append(m)
        cx, cy = data.states[i][:2].astype(np.float64)
        targets.append([sx * (cx * w - left) / cfg.crop_w, sy * (cy * h - top) / cfg.crop_h])
    return np.stack(images), tmasks, np.array(targets)


# ---------------------------------------------------------------- evaluation

def evaluate(params: dict, cfg: TrainConfig, data: SceneArrays, n: int | None = None,
             probe_seed: int | None = None) -> dict:
    """Center-crop metrics on the first ``n`` samples of ``data``.

    Returns per-layer cosine margins (mean over non-degenerate samples), final
    layer probe accuracy, the share of final-layer [CLS] attention on agent
    tokens, and the task MSE. Token classes use ``cfg.eval_beta``.
    """
    n = len(data) if n is None else min(n, len(data))
    probe_seed = cfg.probe_seed if probe_seed is None else probe_seed
    idx = np.arange(n)
    margins = [[] for _ in range(cfg.vit.layers)]
    feats, labels, masses, sq = [], [], [], []
    for start in range(0, n, 32):
        chunk = idx[start:start + 32]
        images, pmasks, targets = crop_batch(data, chunk, cfg, None)
        rec = vit.vit_forward(images, params, cfg.vit)
        pred = rec.outputs[-1][:, 0] @ params["head_w"] + params["head_b"]
        sq.append(((pred - targets) ** 2).mean(axis=1))
        for j in range(len(chunk)):
            tm = token_mask(pmasks[j], cfg.eval_beta, cfg.vit.patch).reshape(-1)
            final = rec.outputs[-1][j, 1:]
            feats.append(final)
            labels.append(tm)
            if 0 < tm.sum() < tm.size:
                for i in range(cfg.vit.layers):
                    margins[i].append(cosine_margin(rec.outputs[i][j, 1:], tm))
                masses.append(vit.agent_attention_mass(rec, tm, cfg.vit.layers, j))
    feats = np.concatenate(feats)
    labels = np.concatenate(labels)
    try:
        probe = linear_probe(feats, labels, probe_seed)
    except ValueError:
        probe = float("nan")
    return {
        "margin": [float(np.mean(m)) if m else float("nan") for m in margins],
        "probe_acc": probe,
        "attn_agent_mass": float(np.mean(masses)) if masses else float("nan"),
        "task_mse": float(np.mean(np.concatenate(sq))),
    }


# ---------------------------------------------------------------- training

def _threads(cfg: TrainConfig) -> int:
    env = os.environ.get("ICON_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"ICON_THREADS must be an integer, got {env!r}") from None
    return max(1, cfg.threads)


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=True)


def train(cfg: TrainConfig, data: SceneArrays | None = None,
          eval_data: SceneArrays | None = None) -> tuple[dict, list[dict]]:
    """Train and return ``(params, metric_records)``.

    Writes the checkpoint and JSON-lines metric log when the corresponding
    paths are set in ``cfg``. The first log line is a header echoing the
    resolved config.
    """
    cfg.validate()
    if data is None:
        if not cfg.dataset:
            raise ValueError("no dataset given")
        data = load_dataset(cfg.dataset)
    if eval_data is None:
        eval_data = data
    threads = _threads(cfg)
    params = init_model(cfg)
    state = adam_init(params)
    hyper = AdamHyper(cfg.lr, cfg.adam_betas[0], cfg.adam_betas[1], cfg.adam_eps)
    n = len(data)
    steps = (n + cfg.batch_size - 1) // cfg.batch_size
    records = []
    log_fh = None
    if cfg.metrics:
        log_fh = open(cfg.metrics, "w", encoding="utf-8")
        log_fh.write(_json_line({"type": "header", "config": cfg.to_dict()}) + "\n")
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            drng = Rng(derive_seed(cfg.seed, 1, epoch))
            order = drng.permutation(n)
            sums = np.zeros(3)
            layer_sum = np.zeros(cfg.vit.layers)
            degenerate = 0
            for step in range(steps):
                idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
                images, pmasks, targets = crop_batch(data, idx, cfg, drng)
                tmasks = [token_mask(m, cfg.beta, cfg.vit.patch) for m in pmasks]
                seeds = [derive_seed(cfg.seed, 2, epoch, step, j) for j in range(len(idx))]
                try:
                    res = loss_and_grads(params, images, tmasks, targets, cfg, seeds,
                                         threads=threads)
                except FloatingPointError as exc:
                    raise FloatingPointError(f"epoch {epoch} step {step}: {exc}") from exc
                if res.degenerate:
                    log.info("epoch %d step %d: %d degenerate masks excluded from ICon",
                             epoch, step, res.degenerate)
                degenerate += res.degenerate
                adam_step(params, res.grads, state, hyper)
                sums += (res.task_loss, res.icon_loss, res.total_loss)
                layer_sum += res.icon_layers
            ev = evaluate(params, cfg, eval_data, cfg.eval_samples)
            record = {
                "type": "epoch",
                "epoch": epoch,
                "task_loss": sums[0] / steps,
                "icon_loss": sums[1] / steps,
                "icon_loss_layers": (layer_sum / steps).tolist(),
                "total_loss": sums[2] / steps,
                "cosine_margin": ev["margin"],
                "probe_acc": ev["probe_acc"],
                "attn_agent_mass": ev["attn_agent_mass"],
                "degenerate": degenerate,
                "wall_time": time.perf_counter() - t0,
            }
            records.append(record)
            log.info("epoch %d task %.5f icon %.4f total %.4f margin %.3f probe %.3f",
                     epoch, record["task_loss"], record["icon_loss"], record["total_loss"],
                     ev["margin"][-1], ev["probe_acc"])
            if log_fh:
                log_fh.write(_json_line(record) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    if cfg.checkpoint:
        vit.save_checkpoint(cfg.checkpoint, params, {"config": cfg.to_dict(), "epochs": cfg.epochs})
    return params, records


def read_metric_log(path) -> tuple[dict, list[dict]]:
    header, records = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            if obj.get("type") == "header":
                header = obj
            else:
                records.append(obj)
    return header, records


def mask_timing(line: str) -> str:
    """A metric-log line with timing fields removed, for determinism comparisons."""
    obj = json.loads(line)
    for key in TIMING_FIELDS:
        obj.pop(key, None)
    return _json_line(obj)


def load_model(path) -> tuple[dict, TrainConfig]:
    params, meta = vit.load_checkpoint(path)
    if "config" not in meta:
        raise ValueError(f"{path}: checkpoint carries no training config")
    return params, TrainConfig.from_dict(meta["config"])


# ---------------------------------------------------------------- attention export

def write_pgm(path, grid: np.ndarray) -> None:
    """8-bit binary PGM, values min-max scaled to 0..255."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    scaled = (g - lo) / (hi - lo) if hi > lo else np.zeros_like(g)
    pix = np.rint(scaled * 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def export_attention(checkpoint, image: np.ndarray, layer: int | None, out_prefix) -> tuple[Path, Path]:
    """Write ``<out>.f32`` (raw LE float32 grid) and ``<out>.pgm`` for one image.

    ``image`` is an ``H x W x 3`` uint8 or [0, 1] float array; it is center-cropped
    to the model input when larger. ``layer`` defaults to the final layer.
    """
    params, cfg = load_model(checkpoint)
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    if img.shape[:2] != (cfg.vit.height, cfg.vit.width):
        img, _, _ = center_crop_pair(img, np.zeros(img.shape[:2], np.uint8), cfg.vit.height, cfg.vit.width)
    layer = cfg.vit.layers if layer is None else layer
    rec = vit.vit_forward(img, params, cfg.vit)
    heat = vit.attention_map(rec, layer)
    out_prefix = Path(out_prefix)
    raw_path = out_prefix.with_name(out_prefix.name + ".f32")
    pgm_path = out_prefix.with_name(out_prefix.name + ".pgm")
    try:
        raw_path.write_bytes(heat.astype("<f4").tobytes())
        write_pgm(pgm_path, heat)
    except OSError as exc:
        raise OSError(f"cannot write attention export to {out_prefix}: {exc}") from exc
    return raw_path, pgm_path


# ---------------------------------------------------------------- sampling benchmark

DEFAULT_KEY_COUNTS = ((5, 25), (10, 50), (20, 100))


def bench_mask(grid: tuple[int, int]) -> np.ndarray:
    """Benchmark token mask: a centered agent block covering about a quarter of the grid."""
    h, w = grid
    m = np.zeros((h, w), dtype=np.int64)
    bh, bw = max(1, h // 2), max(1, w // 2)
    top, left = (h - bh) // 2, (w - bw) // 2
    m[top:top + bh, left:left + bw] = 1
    return m


def bench_sampling(grid: tuple[int, int] = (14, 14), key_counts=DEFAULT_KEY_COUNTS,
                   reps: int = 50, seed: int = 0) -> list[dict]:
    """Median wall time of drawing agent + environment keys, per sampler and key count.

    Each repetition samples ``n_a`` agent keys and ``n_e`` environment keys on
    a fixed mask, as one contrastive step does for one image and layer.
    """
    from .sampler import sample_flat

    if reps < 1:
        raise ValueError("reps must be at least 1")
    m = bench_mask(grid)
    env = 1 - m
    n_agent, n_env = int(m.sum()), int(env.sum())
    for n_a, n_e in key_counts:
        if not (1 <= n_a <= n_agent and 1 <= n_e <= n_env):
            raise ValueError(f"key counts ({n_a}, {n_e}) infeasible on a {grid[0]}x{grid[1]} grid "
                             f"with {n_agent} agent / {n_env} environment tokens")
    rows = []
    for method in ("fps", "random"):
        for n_a, n_e in key_counts:
            rng = Rng(derive_seed(seed, n_a, n_e))
            times = np.empty(reps)
            for r in range(reps):
                t0 = time.perf_counter()
                sample_flat(m, n_a, rng, method)
                sample_flat(env, n_e, rng, method)
                times[r] = time.perf_counter() - t0
            rows.append({"sampler": method, "n_agent": n_a, "n_env": n_e,
                         "median_s": float(np.median(times)), "reps": reps})
    return rows


def growth_ratio(rows: list[dict], sampler: str, small, large) -> float:
    t = {(r["n_agent"], r["n_env"]): r["median_s"] for r in rows if r["sampler"] == sampler}
    return t[tuple(large)] / t[tuple(small)]
