"""Procedural texture corpus for end-to-end checks and demos.

Eight classes of two-tone tile arrangements on a patch-aligned grid. Every
image draws its two tones from one fixed eight-tone palette, with a random
pair, phase, and mild noise per image; each arrangement uses the tones
50/50. First-order patch statistics (which tones are present, and in what
proportion) therefore carry no class signal: telling the classes apart
requires the spatial arrangement of the tiles, which is exactly what the
pre-trained encoder is supposed to capture and a randomly initialized
encoder does not.
"""

from __future__ import annotations

import itertools
from pathlib import Path

import numpy as np
from PIL import Image

from .data import DatasetManifest, make_manifest, save_manifest, split_by_class
from .seeding import CORPUS, derive_rng

CLASS_NAMES = (
    "stripes_h", "stripes_v", "checker_1", "checker_2",
    "diag_main", "diag_anti", "bands_h", "bands_v",
)

# Corners of the RGB cube, pulled in from the clip boundary so per-image
# jitter and pixel noise stay inside [0, 1].
TONES = np.array(list(itertools.product((0.15, 0.85), repeat=3)), dtype=np.float64)


def _tone_grid(kind: int, gh: int, gw: int, phase_y: int, phase_x: int) -> np.ndarray:
    """Boolean (gh, gw) grid: which of the two tones each tile uses."""
    yy, xx = np.meshgrid(np.arange(gh) + phase_y, np.arange(gw) + phase_x, indexing="ij")
    if kind == 0:    # horizontal stripes, period 2
        return yy % 2 == 0
    if kind == 1:    # vertical stripes, period 2
        return xx % 2 == 0
    if kind == 2:    # 1x1 checkerboard
        return (yy + xx) % 2 == 0
    if kind == 3:    # 2x2 checkerboard
        return (yy // 2 + xx // 2) % 2 == 0
    if kind == 4:    # main-diagonal stripes
        return (yy + xx) % 4 < 2
    if kind == 5:    # anti-diagonal stripes
        return (yy - xx) % 4 < 2
    if kind == 6:    # wide horizontal bands
        return yy % 4 < 2
    return xx % 4 < 2  # wide vertical bands


def texture_image(class_id: int, rng: np.random.Generator, size: int = 32,
                  tile: int = 4, noise: float = 0.02,
                  jitter: float = 0.04) -> np.ndarray:
    """One (size, size, 3) float32 image in [0, 1] of the given class."""
    if size % tile:
        raise ValueError(f"size {size} must be a multiple of tile {tile}")
    grid = size // tile
    pair = rng.choice(len(TONES), size=2, replace=False)
    color_a = TONES[pair[0]] + rng.uniform(-jitter, jitter, size=3)
    color_b = TONES[pair[1]] + rng.uniform(-jitter, jitter, size=3)
    tones = _tone_grid(class_id, grid, grid,
                       int(rng.integers(0, grid)), int(rng.integers(0, grid)))
    img = np.where(tones[:, :, None], color_a, color_b)
    img = np.repeat(np.repeat(img, tile, axis=0), tile, axis=1)
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_texture_corpus(root, n_images: int = 512, size: int = 32,
                            tile: int = 4, seed: int = 0,
                            split_ratio: float = 0.8) -> DatasetManifest:
    """Write a PNG corpus of ``n_images`` spread over the eight classes under
    ``root/<class>/``, plus a split manifest at ``root/manifest.jsonl``.
    """
    root = Path(root)
    per_class = n_images // len(CLASS_NAMES)
    for class_id, name in enumerate(CLASS_NAMES):
        class_dir = root / name
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            rng = derive_rng(seed, CORPUS, class_id, i)
            img = texture_image(class_id, rng, size=size, tile=tile)
            arr = np.round(img * 255.0).astype(np.uint8)
            Image.fromarray(arr).save(class_dir / f"img_{i:04d}.png")
    manifest = split_by_class(make_manifest(root), ratio=split_ratio, seed=seed)
    save_manifest(manifest, root / "manifest.jsonl")
    return manifest
