"""Dataset manifests, per-class splitting, and image loading.

A manifest is a JSON Lines file: one record per line with a ``path``, a
string ``label``, and optional ``split`` (``pretrain`` | ``test``) and
``base_class`` fields. Labels are interned to integer indices in order of
first appearance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .augment import bilinear_resize
from .errors import ImageDecodeError, ManifestError
from .seeding import SPLIT, derive_rng

SPLIT_PRETRAIN = "pretrain"
SPLIT_TEST = "test"

_RECORD_KEYS = {"path", "label", "split", "base_class"}
_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm", ".gif", ".tif", ".tiff"}


@dataclass(frozen=True)
class ImageRecord:
    path: str
    label: int          # index into DatasetManifest.class_names
    split: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    class_names: tuple[str, ...]
    base_class: dict[str, str]  # sub-class name -> base-class name

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, split: str) -> tuple[ImageRecord, ...]:
        return tuple(r for r in self.records if r.split == split)

    def class_count(self, label: int) -> int:
        return sum(1 for r in self.records if r.label == label)


def load_manifest(path) -> DatasetManifest:
    """Parse a JSON Lines manifest; errors carry the offending line number."""
    records: list[ImageRecord] = []
    class_names: list[str] = []
    class_index: dict[str, int] = {}
    base_class: dict[str, str] = {}
    seen_paths: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: record must be a JSON object")
            unknown = set(obj) - _RECORD_KEYS
            if unknown:
                raise ManifestError(f"{path}:{lineno}: unknown keys {sorted(unknown)}")
            if not isinstance(obj.get("path"), str) or not isinstance(obj.get("label"), str):
                raise ManifestError(f"{path}:{lineno}: need string 'path' and 'label' fields")
            split = obj.get("split")
            if split is not None and split not in (SPLIT_PRETRAIN, SPLIT_TEST):
                raise ManifestError(f"{path}:{lineno}: split must be "
                                    f"'{SPLIT_PRETRAIN}' or '{SPLIT_TEST}', got {split!r}")
            if obj["path"] in seen_paths:
                raise ManifestError(f"{path}:{lineno}: duplicate path {obj['path']!r}")
            seen_paths.add(obj["path"])
            label = obj["label"]
            if label not in class_index:
                class_index[label] = len(class_names)
                class_names.append(label)
            if "base_class" in obj:
                base_class[label] = obj["base_class"]
            records.append(ImageRecord(path=obj["path"], label=class_index[label], split=split))
    return DatasetManifest(records=tuple(records), class_names=tuple(class_names),
                           base_class=base_class)


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest.records:
            obj = {"path": rec.path, "label": manifest.class_names[rec.label]}
            if rec.split is not None:
                obj["split"] = rec.split
            name = manifest.class_names[rec.label]
            if name in manifest.base_class:
                obj["base_class"] = manifest.base_class[name]
            fh.write(json.dumps(obj) + "\n")


def make_manifest(root) -> DatasetManifest:
    """Build a manifest from a ``root/class_name/image`` directory tree."""
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"{root}: not a directory")
    records: list[ImageRecord] = []
    class_names: list[str] = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(p for p in class_dir.iterdir()
                       if p.is_file() and p.suffix.lower() in _IMAGE_SUFFIXES)
        if not files:
            continue
        label = len(class_names)
        class_names.append(class_dir.name)
        records.extend(ImageRecord(path=str(p), label=label) for p in files)
    return DatasetManifest(records=tuple(records), class_names=tuple(class_names), base_class={})


def split_by_class(manifest: DatasetManifest, ratio: float = 0.8,
                   seed: int = 0) -> DatasetManifest:
    """Assign splits per class: shuffle, first ceil(ratio * n) to pretrain,
    the rest to test. A single-sample class goes entirely to pretrain.
    Same seed, same assignment.
    """
    if not 0.0 < ratio <= 1.0:
        raise ManifestError(f"split ratio must be in (0, 1], got {ratio}")
    new_records = list(manifest.records)
    for label in range(len(manifest.class_names)):
        members = [i for i, r in enumerate(manifest.records) if r.label == label]
        rng = derive_rng(seed, SPLIT, label)
        order = rng.permutation(len(members))
        n_pretrain = math.ceil(ratio * len(members))
        for rank, j in enumerate(order):
            idx = members[j]
            split = SPLIT_PRETRAIN if rank < n_pretrain else SPLIT_TEST
            new_records[idx] = replace(manifest.records[idx], split=split)
    return DatasetManifest(records=tuple(new_records), class_names=manifest.class_names,
                           base_class=dict(manifest.base_class))


def load_image(path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Decode an image to (H, W, 3) float32 in [0, 1], optionally resized.

    Grayscale inputs are replicated across the three channels. Decode
    failures raise :class:`ImageDecodeError`, recoverable by the caller.
    """
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except (FileNotFoundError, UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageDecodeError(f"{path}: {exc}") from None
    if size is not None and arr.shape[:2] != tuple(size):
        arr = bilinear_resize(arr, size[0], size[1])
    return arr


def sample_patch_matrix(manifest: DatasetManifest, image_hw: tuple[int, int],
                        patch_h: int, patch_w: int, max_patches: int,
                        seed: int) -> np.ndarray:
    """Patch vectors from the pretrain split, subsampled to ``max_patches``.

    Undecodable images are skipped; raises when nothing decodes.
    """
    from .tokenizer import extract_patches  # local import avoids a cycle

    records = manifest.subset(SPLIT_PRETRAIN) or manifest.records
    chunks = []
    failures = 0
    for rec in records:
        try:
            img = load_image(rec.path, size=image_hw)
        except ImageDecodeError:
            failures += 1
            continue
        chunks.append(extract_patches(img, patch_h, patch_w))
    if not chunks:
        raise ManifestError(f"no decodable pretrain images ({failures} failures)")
    patches = np.concatenate(chunks, axis=0)
    if patches.shape[0] > max_patches:
        keep = derive_rng(seed, SPLIT, 0xA11).choice(patches.shape[0], size=max_patches,
                                                     replace=False)
        patches = patches[np.sort(keep)]
    return patches
