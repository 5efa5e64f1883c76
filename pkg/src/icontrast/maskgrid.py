"""Patch grids, token-level agent masks and paired crops."""

from __future__ import annotations

import numpy as np

from .numerics import Rng


def patchify(arr: np.ndarray, patch: int) -> np.ndarray:
    """Split an ``H x W [x C]`` array into a row-major grid of ``P x P`` blocks.

    Returns shape ``(H/P, W/P, P, P[, C])``; :func:`unpatchify` inverts it exactly.
    """
    arr = np.asarray(arr)
    if arr.ndim not in (2, 3):
        raise ValueError(f"expected a 2D mask or 3D image, got shape {arr.shape}")
    if patch <= 0:
        raise ValueError("patch size must be positive")
    h, w = arr.shape[:2]
    if h % patch:
        raise ValueError(f"height {h} is not divisible by patch size {patch}")
    if w % patch:
        raise ValueError(f"width {w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    rest = arr.shape[2:]
    blocks = arr.reshape(gh, patch, gw, patch, *rest)
    return np.swapaxes(blocks, 1, 2).copy()


def unpatchify(grid: np.ndarray) -> np.ndarray:
    gh, gw, p, _ = grid.shape[:4]
    rest = grid.shape[4:]
    return np.swapaxes(grid, 1, 2).reshape(gh * p, gw * p, *rest)


def threshold_tokens(grid: np.ndarray, beta: float, patch: int | None = None) -> np.ndarray:
    """Token mask from a patchified pixel mask.

    A token is agent (1) iff its patch holds strictly more than ``beta * P**2``
    agent pixels, so ``beta = 1`` gives an all-zero mask.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    grid = np.asarray(grid)
    if grid.ndim != 4 or grid.shape[2] != grid.shape[3]:
        raise ValueError(f"expected a (gh, gw, P, P) patch grid, got {grid.shape}")
    p = grid.shape[2] if patch is None else patch
    if p != grid.shape[2]:
        raise ValueError(f"patch size {p} does not match grid blocks of {grid.shape[2]}")
    counts = grid.reshape(grid.shape[0], grid.shape[1], -1).sum(axis=-1, dtype=np.int64)
    return (counts > beta * p * p).astype(np.uint8)


def token_mask(mask: np.ndarray, beta: float, patch: int) -> np.ndarray:
    return threshold_tokens(patchify(mask, patch), beta, patch)


def _check_crop(img: np.ndarray, mask: np.ndarray, crop_h: int, crop_w: int) -> None:
    if img.shape[:2] != mask.shape:
        raise ValueError(f"image {img.shape[:2]} and mask {mask.shape} differ in size")
    h, w = mask.shape
    if crop_h > h or crop_w > w:
        raise ValueError(f"crop {crop_h}x{crop_w} exceeds source {h}x{w}")
    if crop_h <= 0 or crop_w <= 0:
        raise ValueError("crop dimensions must be positive")


def crop_pair(img, mask, top: int, left: int, crop_h: int, crop_w: int):
    return (img[top:top + crop_h, left:left + crop_w].copy(),
            mask[top:top + crop_h, left:left + crop_w].copy())


def random_crop_pair(img: np.ndarray, mask: np.ndarray, crop_h: int, crop_w: int,
                     rng: Rng) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    """Crop image and mask with the same window; offsets drawn row first, then column.

    Returns ``(image, mask, (top, left))``.
    """
    _check_crop(img, mask, crop_h, crop_w)
    top = rng.randbelow(mask.shape[0] - crop_h + 1)
    left = rng.randbelow(mask.shape[1] - crop_w + 1)
    return (*crop_pair(img, mask, top, left, crop_h, crop_w), (top, left))


def center_crop_pair(img: np.ndarray, mask: np.ndarray, crop_h: int,
                     crop_w: int) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    """Inference-time crop; odd remainders round the offset down."""
    _check_crop(img, mask, crop_h, crop_w)
    top = (mask.shape[0] - crop_h) // 2
    left = (mask.shape[1] - crop_w) // 2
    return (*crop_pair(img, mask, top, left, crop_h, crop_w), (top, left))
