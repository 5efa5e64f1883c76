"""Procedural articulated-arm scenes with exact agent masks, and the ICDS file format.

ICDS layout (all integers little-endian)::

    b"ICDS" | u32 version=1 | u32 n | u32 H | u32 W | u32 C | u32 k
    n x ( H*W*C u8 image, row-major RGB | H*W u8 mask in {0,1} | k float32 state )

The state holds the normalized mask centroid ``(x, y)`` followed by the joint
angles in radians (zero-padded up to ``k - 2`` joints).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng, derive_seed

MAGIC = b"ICDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")

# Saturated colors for the arm and distractors. Easy-mode distractors never take the agent's color.
PALETTE = np.array([
    [220, 60, 50], [40, 150, 220], [240, 180, 30], [60, 190, 90],
    [170, 70, 200], [240, 120, 20], [30, 200, 190], [200, 200, 200],
], dtype=np.float64)


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    links_min: int = 2
    links_max: int = 3
    link_length: tuple[float, float] = (14.0, 20.0)
    link_width: tuple[float, float] = (8.0, 11.0)
    effector_radius: tuple[float, float] = (5.0, 7.0)
    background: str = "mixed"  # noise | checker | gradient | mixed (pick per scene)
    distractors_min: int = 0
    distractors_max: int = 3
    hard: bool = False
    agent_color: int | None = 0  # palette index; None picks one per scene
    area_bounds: tuple[float, float] = (0.03, 0.25)
    max_tries: int = 200

    @property
    def state_dim(self) -> int:
        return 2 + self.links_max

    def validate(self) -> None:
        if not 2 <= self.links_min <= self.links_max <= 3:
            raise ValueError("link count must be within 2..3")
        if not 0 <= self.distractors_min <= self.distractors_max <= 3:
            raise ValueError("distractor count must be within 0..3")
        if self.agent_color is not None and not 0 <= self.agent_color < len(PALETTE):
            raise ValueError(f"agent_color must index the {len(PALETTE)}-color palette")
        if self.background not in ("noise", "checker", "gradient", "mixed"):
            raise ValueError(f"unknown background style {self.background!r}")
        lo, hi = self.area_bounds
        if not 0 <= lo < hi <= 1:
            raise ValueError("area bounds must satisfy 0 <= lo < hi <= 1")


@dataclass
class SceneSample:
    image_u8: np.ndarray            # (H, W, 3) uint8
    mask: np.ndarray                # (H, W) uint8 in {0, 1}
    agent_state: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float32))

    @property
    def image(self) -> np.ndarray:
        return self.image_u8.astype(np.float64) / 255.0

    @property
    def centroid(self) -> np.ndarray:
        return self.agent_state[:2].astype(np.float64)


def _uniform(rng: Rng, lo: float, hi: float) -> float:
    return lo + (hi - lo) * rng.uniform()


def _background(cfg: SceneConfig, rng: Rng) -> np.ndarray:
    h, w = cfg.height, cfg.width
    style = cfg.background
    if style == "mixed":
        style = ("noise", "checker", "gradient")[rng.randbelow(3)]
    c1 = rng.uniform_array(3) * 200 + 20
    c2 = rng.uniform_array(3) * 200 + 20
    if style == "checker":
        period = 4 + rng.randbelow(13)
        rr, cc = np.mgrid[0:h, 0:w]
        sel = ((rr // period + cc // period) % 2).astype(bool)
        img = np.where(sel[..., None], c1, c2)
    elif style == "gradient":
        theta = _uniform(rng, 0, 2 * np.pi)
        rr, cc = np.mgrid[0:h, 0:w]
        t = (np.cos(theta) * cc / w + np.sin(theta) * rr / h)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        img = c1 * (1 - t[..., None]) + c2 * t[..., None]
    else:
        coarse = rng.uniform_array((h // 8 + 1, w // 8 + 1, 3)) * 200 + 20
        rows = np.minimum(np.arange(h) // 8, coarse.shape[0] - 1)
        cols = np.minimum(np.arange(w) // 8, coarse.shape[1] - 1)
        img = coarse[rows][:, cols] + (rng.uniform_array((h, w, 3)) - 0.5) * 30
    return img


def _capsule(rr, cc, p0, p1, radius):
    """Pixels whose centers lie within ``radius`` of the segment ``p0-p1``."""
    d = p1 - p0
    denom = float(d @ d) or 1.0
    t = np.clip(((rr - p0[0]) * d[0] + (cc - p0[1]) * d[1]) / denom, 0.0, 1.0)
    dr = rr - (p0[0] + t * d[0])
    dc = cc - (p0[1] + t * d[1])
    return dr * dr + dc * dc <= radius * radius


def _disk(rr, cc, center, radius):
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius * radius


def _arm_mask(cfg: SceneConfig, rng: Rng, pad: int):
    """Silhouette on a padded canvas plus joint angles (radians)."""
    h, w = cfg.height, cfg.width
    rr, cc = np.mgrid[0:h + 2 * pad, 0:w + 2 * pad].astype(np.float64) + 0.5
    n_links = cfg.links_min + rng.randbelow(cfg.links_max - cfg.links_min + 1)
    width = _uniform(rng, *cfg.link_width)
    base = np.array([h - 0.75 * width - 0.5 + pad, _uniform(rng, 0.25 * w, 0.75 * w) + pad])
    mask = _disk(rr, cc, base, width * 0.75)
    angles = []
    heading = _uniform(rng, -np.pi * 0.85, -np.pi * 0.15)
    joint = base
    for i in range(n_links):
        if i:
            heading += _uniform(rng, -2 * np.pi / 3, 2 * np.pi / 3)
        angles.append(heading)
        length = _uniform(rng, *cfg.link_length)
        nxt = joint + length * np.array([np.sin(heading), np.cos(heading)])
        mask |= _capsule(rr, cc, joint, nxt, width / 2)
        joint = nxt
    mask |= _disk(rr, cc, joint, _uniform(rng, *cfg.effector_radius))
    return mask, angles


def _paint_distractors(img, cfg: SceneConfig, rng: Rng, agent_idx: int):
    h, w = cfg.height, cfg.width
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    count = cfg.distractors_min + rng.randbelow(cfg.distractors_max - cfg.distractors_min + 1)
    for _ in range(count):
        if cfg.hard:
            color = PALETTE[agent_idx]
        else:
            color = PALETTE[(agent_idx + 1 + rng.randbelow(len(PALETTE) - 1)) % len(PALETTE)]
        center = np.array([_uniform(rng, 0, h), _uniform(rng, 0, w)])
        if rng.randbelow(2):
            sel = _disk(rr, cc, center, _uniform(rng, 4, 8))
        else:
            half = np.array([_uniform(rng, 3, 8), _uniform(rng, 3, 8)])
            sel = (np.abs(rr - center[0]) <= half[0]) & (np.abs(cc - center[1]) <= half[1])
        img[sel] = color


def render_scene(cfg: SceneConfig, rng: Rng) -> SceneSample:
    """Draw one scene. Distractors are painted first so the arm occludes them."""
    cfg.validate()
    h, w = cfg.height, cfg.width
    pad = 48
    for _ in range(cfg.max_tries):
        big, angles = _arm_mask(cfg, rng, pad)
        inner = big[pad:pad + h, pad:pad + w]
        if big.sum() != inner.sum():
            continue
        frac = inner.mean()
        if cfg.area_bounds[0] <= frac <= cfg.area_bounds[1]:
            break
    else:
        raise RuntimeError(f"could not place the agent inside the frame in {cfg.max_tries} tries")
    img = _background(cfg, rng)
    agent_idx = cfg.agent_color if cfg.agent_color is not None else rng.randbelow(len(PALETTE))
    _paint_distractors(img, cfg, rng, agent_idx)
    img[inner] = PALETTE[agent_idx]
    image_u8 = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    mask = inner.astype(np.uint8)
    rows, cols = np.nonzero(mask)
    state = np.zeros(cfg.state_dim, dtype=np.float32)
    state[0] = (cols.mean() + 0.5) / w
    state[1] = (rows.mean() + 0.5) / h
    state[2:2 + len(angles)] = angles
    return SceneSample(image_u8, mask, state)


def render_indexed(cfg: SceneConfig, base_seed: int, index: int) -> SceneSample:
    return render_scene(cfg, Rng(derive_seed(base_seed, index)))


@dataclass
class SceneArrays:
    """Column storage of a dataset: ``images`` (n,H,W,3) u8, ``masks`` (n,H,W) u8, ``states`` (n,k) f32."""
    images: np.ndarray
    masks: np.ndarray
    states: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> SceneSample:
        return SceneSample(self.images[i], self.masks[i], self.states[i])

    @classmethod
    def from_samples(cls, samples: list[SceneSample], height: int, width: int,
                     state_dim: int) -> "SceneArrays":
        n = len(samples)
        images = np.zeros((n, height, width, 3), np.uint8)
        masks = np.zeros((n, height, width), np.uint8)
        states = np.zeros((n, state_dim), np.float32)
        for i, s in enumerate(samples):
            images[i], masks[i], states[i] = s.image_u8, s.mask, s.agent_state
        return cls(images, masks, states)


def generate(n: int, cfg: SceneConfig, base_seed: int) -> SceneArrays:
    samples = [render_indexed(cfg, base_seed, i) for i in range(n)]
    return SceneArrays.from_samples(samples, cfg.height, cfg.width, cfg.state_dim)


def write_dataset(path, data: SceneArrays) -> None:
    path = Path(path)
    n, h, w, c = data.images.shape
    k = data.states.shape[1]
    try:
        with path.open("wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, n, h, w, c, k))
            for i in range(n):
                fh.write(np.ascontiguousarray(data.images[i], np.uint8).tobytes())
                fh.write(np.ascontiguousarray(data.masks[i], np.uint8).tobytes())
                fh.write(np.ascontiguousarray(data.states[i], "<f4").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc}") from exc


def make_dataset(n: int, cfg: SceneConfig, base_seed: int, path) -> SceneArrays:
    """Render ``n`` scenes (sample ``i`` seeded by ``(base_seed, i)``) and write them to ``path``."""
    data = generate(n, cfg, base_seed)
    write_dataset(path, data)
    return data


def load_dataset(path) -> SceneArrays:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r} (\"ICDS\")")
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    _, version, n, h, w, c, k = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported ICDS version {version}")
    rec = h * w * c + h * w + 4 * k
    expected = _HEADER.size + n * rec
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {n} samples, found {len(raw)}")
    body = np.frombuffer(raw, np.uint8, offset=_HEADER.size).reshape(n, rec)
    images = body[:, :h * w * c].reshape(n, h, w, c).copy()
    masks = body[:, h * w * c:h * w * c + h * w].reshape(n, h, w).copy()
    states = body[:, h * w * c + h * w:].copy().view("<f4").reshape(n, k).astype(np.float32)
    if masks.max(initial=0) > 1:
        raise ValueError(f"{path}: mask values outside {{0, 1}}")
    return SceneArrays(images, masks, states)
