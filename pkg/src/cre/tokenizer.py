"""Vector-quantized image tokenization with a k-means patch codebook.

An image is cut into non-overlapping raster-order patches and each patch is
replaced by the id of its nearest codebook centroid, giving a fixed-length
sequence of discrete token ids. Any drop-in tokenizer with the same
``tokenize`` signature (e.g. an adapter around a learned quantizer) works
downstream; this one is fitted by k-means on sample patches.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, GeometryError, InsufficientDataError
from .seeding import derive_rng

_MAGIC = b"CREQ"
_VERSION = 1
_HEADER = struct.Struct("<4sHIHHH")  # magic, version, K, patch_h, patch_w, channels


@dataclass(frozen=True)
class Codebook:
    """K centroids of flattened patch vectors (patch_h * patch_w * channels)."""

    centroids: np.ndarray  # (K, D) float32
    patch_h: int
    patch_w: int
    channels: int

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.patch_h * self.patch_w * self.channels

    def __post_init__(self):
        if self.centroids.ndim != 2 or self.centroids.shape[1] != self.dim:
            raise FormatError(
                f"codebook centroids {self.centroids.shape} do not match "
                f"patch {self.patch_h}x{self.patch_w}x{self.channels}"
            )


@dataclass(frozen=True)
class TokenSequence:
    """Length-L array of token ids in [0, K)."""

    ids: np.ndarray  # (L,) int64
    grid_h: int
    grid_w: int

    @property
    def length(self) -> int:
        return self.ids.shape[0]


def extract_patches(image: np.ndarray, patch_h: int, patch_w: int) -> np.ndarray:
    """Raster-order patches of ``image`` (H, W, C), flattened to (L, D)."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise GeometryError(f"expected H x W x C image, got shape {image.shape}")
    h, w, c = image.shape
    if h % patch_h or w % patch_w:
        raise GeometryError(
            f"image {h}x{w} is not divisible by patch {patch_h}x{patch_w}"
        )
    gh, gw = h // patch_h, w // patch_w
    patches = image.reshape(gh, patch_h, gw, patch_w, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(patches.reshape(gh * gw, patch_h * patch_w * c))


def assemble_patches(patches: np.ndarray, grid_h: int, grid_w: int,
                     patch_h: int, patch_w: int, channels: int) -> np.ndarray:
    """Inverse of :func:`extract_patches`."""
    grid = patches.reshape(grid_h, grid_w, patch_h, patch_w, channels)
    return np.ascontiguousarray(
        grid.transpose(0, 2, 1, 3, 4).reshape(grid_h * patch_h, grid_w * patch_w, channels)
    )


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # ||p - c||^2 expanded; clamped at 0 against rounding.
    d2 = (
        (points * points).sum(axis=1)[:, None]
        - 2.0 * points @ centers.T
        + (centers * centers).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    d2 = _squared_distances(points, centers[:1])[:, 0]
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = points[rng.integers(n)]
        else:
            centers[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, _squared_distances(points, centers[i : i + 1])[:, 0])
    return centers


def fit_codebook(patches: np.ndarray, k: int, seed: int,
                 patch_h: int, patch_w: int, channels: int,
                 max_iters: int = 100, tol: float = 1e-4,
                 error_history: list | None = None) -> Codebook:
    """K-means over sample patch vectors, k-means++ initialized.

    Runs Lloyd iterations until the max centroid shift drops below ``tol``
    or ``max_iters`` is reached. Empty clusters are re-seeded from the point
    farthest from its assigned centroid. Deterministic given ``seed``. Pass
    ``error_history`` to collect the per-iteration mean quantization error.
    """
    points = np.asarray(patches, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != patch_h * patch_w * channels:
        raise FormatError(
            f"patch matrix {points.shape} does not match {patch_h}x{patch_w}x{channels}"
        )
    n = points.shape[0]
    if n < k:
        raise InsufficientDataError(f"need at least K={k} patches to fit, got {n}")

    rng = derive_rng(seed, 0)
    centers = _kmeans_pp_init(points, k, rng)
    for _ in range(max_iters):
        d2 = _squared_distances(points, centers)
        assign = d2.argmin(axis=1)
        nearest = d2[np.arange(n), assign]
        if error_history is not None:
            error_history.append(float(nearest.mean()))
        new_centers = centers.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new_centers[j] = points[members].mean(axis=0)
        # Re-seed empties from the globally farthest point, one at a time so
        # a donor point is not claimed twice.
        empties = [j for j in range(k) if not (assign == j).any()]
        for j in empties:
            far = int(nearest.argmax())
            new_centers[j] = points[far]
            nearest[far] = 0.0
        shift = np.abs(new_centers - centers).max()
        centers = new_centers
        if shift < tol:
            break
    return Codebook(
        centroids=centers.astype(np.float32),
        patch_h=patch_h, patch_w=patch_w, channels=channels,
    )


def quantization_error(patches: np.ndarray, codebook: Codebook) -> float:
    """Mean squared distance from each patch to its nearest centroid."""
    points = np.asarray(patches, dtype=np.float64)
    d2 = _squared_distances(points, codebook.centroids.astype(np.float64))
    return float(d2.min(axis=1).mean())


def tokenize(image: np.ndarray, codebook: Codebook) -> TokenSequence:
    """Assign each raster-order patch the id of its nearest centroid.

    Near-ties resolve to the lowest id (argmin convention). Total and
    deterministic on images divisible by the patch size.
    """
    patches = extract_patches(image, codebook.patch_h, codebook.patch_w)
    if patches.shape[1] != codebook.dim:
        raise GeometryError(
            f"patch dim {patches.shape[1]} does not match codebook dim {codebook.dim}"
        )
    d2 = _squared_distances(patches.astype(np.float64), codebook.centroids.astype(np.float64))
    ids = d2.argmin(axis=1)
    h, w, _ = image.shape
    return TokenSequence(ids=ids.astype(np.int64),
                         grid_h=h // codebook.patch_h, grid_w=w // codebook.patch_w)


def detokenize(tokens: TokenSequence, codebook: Codebook) -> np.ndarray:
    """Rebuild an image by pasting each token's centroid patch in raster order."""
    ids = np.asarray(tokens.ids)
    if ids.size and (ids.min() < 0 or ids.max() >= codebook.k):
        raise IndexError(f"token id out of range [0, {codebook.k}): max={ids.max()}")
    patches = codebook.centroids[ids]
    return assemble_patches(patches, tokens.grid_h, tokens.grid_w,
                            codebook.patch_h, codebook.patch_w, codebook.channels)


def save_codebook(codebook: Codebook, path) -> None:
    payload = codebook.centroids.astype("<f4").tobytes()
    header = _HEADER.pack(_MAGIC, _VERSION, codebook.k,
                          codebook.patch_h, codebook.patch_w, codebook.channels)
    Path(path).write_bytes(header + payload)


def load_codebook(path) -> Codebook:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated codebook file ({len(raw)} bytes)")
    magic, version, k, patch_h, patch_w, channels = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported codebook version {version}")
    dim = patch_h * patch_w * channels
    expected = _HEADER.size + k * dim * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for K={k}, D={dim}, got {len(raw)}")
    centroids = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(k, dim).copy()
    return Codebook(centroids=centroids, patch_h=patch_h, patch_w=patch_w, channels=channels)
