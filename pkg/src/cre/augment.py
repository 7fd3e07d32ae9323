"""Stochastic two-view augmentation: random resized crop plus horizontal flip.

All randomness comes from an explicit generator, so a view stream is a pure
function of the generator's seed. Pixel values stay in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class AugmentConfig:
    out_h: int = 32
    out_w: int = 32
    scale_min: float = 0.2
    scale_max: float = 1.0
    aspect_min: float = 3.0 / 4.0
    aspect_max: float = 4.0 / 3.0
    hflip_p: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.scale_min <= self.scale_max <= 1.0:
            raise ContractError(
                f"crop scale range ({self.scale_min}, {self.scale_max}) must satisfy 0 < min <= max <= 1"
            )
        if not 0.0 <= self.hflip_p <= 1.0:
            raise ContractError(f"hflip_p must be in [0, 1], got {self.hflip_p}")
        if self.out_h < 1 or self.out_w < 1 or self.aspect_min > self.aspect_max:
            raise ContractError("invalid output size or aspect range")


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (H, W, C) by bilinear interpolation with half-pixel centers.

    A same-size resize is the exact identity; outputs are convex
    combinations of inputs, so the value range is preserved.
    """
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)[:, None, None]
    wx = (xs - x0).astype(np.float32)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bot = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def _crop_geometry(h: int, w: int, cfg: AugmentConfig,
                   rng: np.random.Generator) -> tuple[int, int, int, int]:
    """(top, left, crop_h, crop_w); center-crop fallback after 10 infeasible draws."""
    area = h * w
    for _ in range(10):
        target_area = rng.uniform(cfg.scale_min, cfg.scale_max) * area
        aspect = math.exp(rng.uniform(math.log(cfg.aspect_min), math.log(cfg.aspect_max)))
        cw = int(round(math.sqrt(target_area * aspect)))
        ch = int(round(math.sqrt(target_area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def random_resized_crop(image: np.ndarray, cfg: AugmentConfig,
                        rng: np.random.Generator) -> np.ndarray:
    """Crop a random area/aspect window and resize it to the output size."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ContractError(f"expected H x W x C image, got shape {image.shape}")
    top, left, ch, cw = _crop_geometry(image.shape[0], image.shape[1], cfg, rng)
    return bilinear_resize(image[top:top + ch, left:left + cw], cfg.out_h, cfg.out_w)


def random_hflip(image: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Mirror across the vertical axis with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"flip probability must be in [0, 1], got {p}")
    if rng.random() < p:
        return np.ascontiguousarray(image[:, ::-1, :])
    return image


def make_two_views(image: np.ndarray, cfg: AugmentConfig,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two independent crop+flip draws of one image from one seed stream."""
    v1 = random_hflip(random_resized_crop(image, cfg, rng), cfg.hflip_p, rng)
    v2 = random_hflip(random_resized_crop(image, cfg, rng), cfg.hflip_p, rng)
    return v1, v2
