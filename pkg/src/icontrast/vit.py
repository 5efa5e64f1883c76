"""A small pre-norm Vision Transformer in numpy with a hand-written backward pass.

The forward pass keeps every intermediate it needs for backprop in a
:class:`ForwardRecord`. Upstream gradients can be injected at the output of any
encoder layer, which is how the multi-level contrastive loss and the [CLS] task
head feed the backward pass together.

Checkpoints use the ICKP layout: ``b"ICKP"``, u32 LE version, u32 LE header
length, a UTF-8 JSON header listing ``{"name", "shape"}`` for every parameter
in order (plus free-form metadata), then each parameter as raw little-endian
float64 in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .maskgrid import patchify
from .numerics import Rng

LN_EPS = 1e-6
_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class ViTConfig:
    height: int = 56
    width: int = 56
    channels: int = 3
    patch: int = 8
    dim: int = 32
    layers: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    def validate(self) -> None:
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(f"image {self.height}x{self.width} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.layers < 1:
            raise ValueError("need at least one encoder layer")


def param_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    d, hid = cfg.dim, cfg.hidden
    shapes: dict[str, tuple[int, ...]] = {
        "patch_w": (cfg.patch * cfg.patch * cfg.channels, d),
        "patch_b": (d,),
        "cls": (d,),
        "pos": (cfg.n_tokens + 1, d),
    }
    for i in range(1, cfg.layers + 1):
        p = f"blk{i}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "qkv_w": (d, 3 * d), p + "qkv_b": (3 * d,),
            p + "proj_w": (d, d), p + "proj_b": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "fc1_w": (d, hid), p + "fc1_b": (hid,),
            p + "fc2_w": (hid, d), p + "fc2_b": (d,),
        })
    return shapes


def init_params(cfg: ViTConfig, rng: Rng, std: float = 0.02) -> dict[str, np.ndarray]:
    """Normal(0, std) for weights, [CLS] and positions; zero biases; unit LN scales."""
    cfg.validate()
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            params[name] = np.ones(shape)
        elif leaf.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal_array(shape, std)
    return params


def gelu(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x * _SQRT_HALF)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def patch_vectors(images: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """``(B, H, W, C)`` images to ``(B, N, P*P*C)`` flattened row-major patches."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (cfg.height, cfg.width, cfg.channels):
        raise ValueError(f"image shape {images.shape[1:]} does not match config "
                         f"{(cfg.height, cfg.width, cfg.channels)}")
    b = images.shape[0]
    grids = np.stack([patchify(im, cfg.patch) for im in images])
    return grids.reshape(b, cfg.n_tokens, -1)


def _embed(patches: np.ndarray, params: dict, cfg: ViTConfig) -> np.ndarray:
    x = patches @ params["patch_w"] + params["patch_b"]
    cls = np.broadcast_to(params["cls"], (x.shape[0], 1, cfg.dim))
    return np.concatenate([cls, x], axis=1) + params["pos"]


def patch_embed(images: np.ndarray, params: dict, cfg: ViTConfig) -> np.ndarray:
    """Token sequence ``(B, N+1, D)``: [CLS] first, positional embeddings added."""
    return _embed(patch_vectors(images, cfg), params, cfg)


@dataclass
class ForwardRecord:
    cfg: ViTConfig
    patches: np.ndarray
    inputs: list = field(default_factory=list)   # block inputs, one per layer
    outputs: list = field(default_factory=list)  # block outputs, one per layer
    caches: list = field(default_factory=list)
    attn: list = field(default_factory=list)     # (B, heads, T, T) per layer

    @property
    def batch(self) -> int:
        return self.patches.shape[0]

    def layer_features(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """``(F_cls, F)`` of 1-based ``layer``: ``(B, D)`` and ``(B, N, D)``."""
        out = self.outputs[layer - 1]
        return out[:, 0], out[:, 1:]

    def feature_maps(self, sample: int) -> list[np.ndarray]:
        """Per-layer ``(gh, gw, D)`` token maps of one sample, [CLS] excluded."""
        gh, gw = self.cfg.grid
        return [out[sample, 1:].reshape(gh, gw, -1) for out in self.outputs]


def _split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _block_forward(x, params, prefix, cfg):
    a, ln1 = _layer_norm(x, params[prefix + "ln1_g"], params[prefix + "ln1_b"])
    qkv = a @ params[prefix + "qkv_w"] + params[prefix + "qkv_b"]
    d = cfg.dim
    q, k, v = (_split_heads(qkv[..., i * d:(i + 1) * d], cfg.heads) for i in range(3))
    scale = 1.0 / np.sqrt(d // cfg.heads)
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    o = _merge_heads(p @ v)
    h = x + o @ params[prefix + "proj_w"] + params[prefix + "proj_b"]
    c, ln2 = _layer_norm(h, params[prefix + "ln2_g"], params[prefix + "ln2_b"])
    u = c @ params[prefix + "fc1_w"] + params[prefix + "fc1_b"]
    gl = gelu(u)
    y = h + gl @ params[prefix + "fc2_w"] + params[prefix + "fc2_b"]
    cache = dict(a=a, ln1=ln1, q=q, k=k, v=v, p=p, o=o, c=c, ln2=ln2, u=u, gl=gl, scale=scale)
    return y, p, cache


def _outer_sum(a, b):
    """``sum_{b,t} a[b,t,:]^T b[b,t,:]`` as one matmul."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _block_backward(dy, params, prefix, cfg, cache, grads):
    dh = dy.copy()
    grads[prefix + "fc2_w"] += _outer_sum(cache["gl"], dy)
    grads[prefix + "fc2_b"] += dy.sum(axis=(0, 1))
    du = (dy @ params[prefix + "fc2_w"].T) * gelu_grad(cache["u"])
    grads[prefix + "fc1_w"] += _outer_sum(cache["c"], du)
    grads[prefix + "fc1_b"] += du.sum(axis=(0, 1))
    dc = du @ params[prefix + "fc1_w"].T
    dx2, dg, db = _layer_norm_backward(dc, params[prefix + "ln2_g"], cache["ln2"])
    grads[prefix + "ln2_g"] += dg
    grads[prefix + "ln2_b"] += db
    dh += dx2

    grads[prefix + "proj_w"] += _outer_sum(cache["o"], dh)
    grads[prefix + "proj_b"] += dh.sum(axis=(0, 1))
    do = _split_heads(dh @ params[prefix + "proj_w"].T, cfg.heads)
    p, q, k, v = cache["p"], cache["q"], cache["k"], cache["v"]
    dp = do @ v.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ do
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * cache["scale"]
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.concatenate([_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1)
    grads[prefix + "qkv_w"] += _outer_sum(cache["a"], dqkv)
    grads[prefix + "qkv_b"] += dqkv.sum(axis=(0, 1))
    da = dqkv @ params[prefix + "qkv_w"].T
    dx1, dg, db = _layer_norm_backward(da, params[prefix + "ln1_g"], cache["ln1"])
    grads[prefix + "ln1_g"] += dg
    grads[prefix + "ln1_b"] += db
    return dh + dx1


def vit_forward(images: np.ndarray, params: dict, cfg: ViTConfig) -> ForwardRecord:
    """Run the encoder on ``(B, H, W, C)`` images (a single ``(H, W, C)`` is promoted)."""
    patches = patch_vectors(images, cfg)
    x = _embed(patches, params, cfg)
    rec = ForwardRecord(cfg, patches)
    for i in range(1, cfg.layers + 1):
        rec.inputs.append(x)
        x, p, cache = _block_forward(x, params, f"blk{i}.", cfg)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite activation in encoder layer {i}")
        rec.outputs.append(x)
        rec.attn.append(p)
        rec.caches.append(cache)
    return rec


def vit_backward(token_grads: list, cls_grad: np.ndarray | None, record: ForwardRecord,
                 params: dict) -> dict[str, np.ndarray]:
    """Parameter gradients from upstream gradients at the encoder outputs.

    ``token_grads[i]`` is ``(B, N, D)`` (or ``None``) for the patch tokens of
    layer ``i + 1``; ``cls_grad`` is ``(B, D)`` for the final-layer [CLS] token.
    """
    cfg = record.cfg
    if len(token_grads) != cfg.layers:
        raise ValueError(f"expected {cfg.layers} per-layer gradients, got {len(token_grads)}")
    b, t = record.batch, cfg.n_tokens + 1
    grads = {name: np.zeros_like(v) for name, v in params.items()}
    g = np.zeros((b, t, cfg.dim))
    for i in range(cfg.layers, 0, -1):
        tg = token_grads[i - 1]
        if tg is not None:
            tg = np.asarray(tg).reshape(b, -1, cfg.dim)
            if tg.shape != (b, t - 1, cfg.dim):
                raise ValueError(f"layer {i} gradient has shape {tg.shape}, "
                                 f"expected {(b, t - 1, cfg.dim)}")
            g[:, 1:] += tg
        if i == cfg.layers and cls_grad is not None:
            cg = np.asarray(cls_grad)
            if cg.shape != (b, cfg.dim):
                raise ValueError(f"cls gradient has shape {cg.shape}, expected {(b, cfg.dim)}")
            g[:, 0] += cg
        g = _block_backward(g, params, f"blk{i}.", cfg, record.caches[i - 1], grads)
    grads["pos"] += g.sum(axis=0)
    grads["cls"] += g[:, 0].sum(axis=0)
    gp = g[:, 1:]
    grads["patch_w"] += _outer_sum(record.patches, gp)
    grads["patch_b"] += gp.sum(axis=(0, 1))
    return grads


def cls_attention_row(record: ForwardRecord, layer: int, sample: int = 0) -> np.ndarray:
    """Head-averaged attention of the [CLS] query over all ``N + 1`` tokens."""
    if not 1 <= layer <= record.cfg.layers:
        raise ValueError(f"layer must be in 1..{record.cfg.layers}, got {layer}")
    return record.attn[layer - 1][sample, :, 0, :].mean(axis=0)


def attention_map(record: ForwardRecord, layer: int, sample: int = 0) -> np.ndarray:
    """[CLS] attention over patch tokens on the token grid, min-max scaled to [0, 1]."""
    row = cls_attention_row(record, layer, sample)[1:]
    lo, hi = row.min(), row.max()
    heat = (row - lo) / (hi - lo) if hi > lo else np.zeros_like(row)
    return heat.reshape(record.cfg.grid)


def agent_attention_mass(record: ForwardRecord, tmask: np.ndarray, layer: int,
                         sample: int = 0) -> float:
    """Share of the [CLS] patch attention that lands on agent tokens."""
    row = cls_attention_row(record, layer, sample)[1:]
    m = np.asarray(tmask).reshape(-1).astype(bool)
    return float(row[m].sum() / row.sum())


MAGIC = b"ICKP"
VERSION = 1


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    header = {"params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()]}
    if meta:
        header["meta"] = meta
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(raw)))
        fh.write(raw)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 12:
        raise ValueError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt header: {exc}") from exc
    params, off = {}, 12 + hlen
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(data):
            raise ValueError(f"{path}: truncated at parameter {entry['name']}")
        params[entry["name"]] = np.frombuffer(data, "<f8", count=nbytes // 8,
                                              offset=off).reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return params, header.get("meta", {})


def config_dict(cfg: ViTConfig) -> dict:
    return asdict(cfg)
