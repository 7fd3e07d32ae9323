"""Random token masking: which positions the encoder may not see."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .seeding import derive_rng


@dataclass(frozen=True)
class MaskVector:
    """Boolean flags over a length-L token sequence; True = masked."""

    flags: np.ndarray  # (L,) bool

    @property
    def length(self) -> int:
        return self.flags.shape[0]

    @property
    def count(self) -> int:
        return int(self.flags.sum())

    @property
    def masked_positions(self) -> np.ndarray:
        return np.flatnonzero(self.flags)

    @property
    def visible_positions(self) -> np.ndarray:
        return np.flatnonzero(~self.flags)


def sample_mask(length: int, ratio: float, rng_seed: int) -> MaskVector:
    """Mask exactly ``floor(length * ratio)`` positions, uniformly without
    replacement; deterministic per seed.
    """
    if length < 2:
        raise ContractError(f"sample_mask: need length >= 2, got {length}")
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"sample_mask: ratio must be in (0, 1), got {ratio}")
    count = math.floor(length * ratio)
    if count < 1:
        raise ContractError(
            f"sample_mask: floor({length} * {ratio}) = 0 leaves nothing to reconstruct"
        )
    rng = derive_rng(rng_seed)
    positions = rng.choice(length, size=count, replace=False)
    flags = np.zeros(length, dtype=bool)
    flags[positions] = True
    return MaskVector(flags=flags)


@dataclass(frozen=True)
class MaskedTokens:
    """Partition of a token sequence into encoder input and hidden targets."""

    visible_ids: np.ndarray       # (V,) token ids the encoder sees
    visible_positions: np.ndarray  # (V,) their original positions
    masked_positions: np.ndarray   # (M,) hidden positions, V + M == L


def apply_mask(token_ids: np.ndarray, mask: MaskVector) -> MaskedTokens:
    """Split ``token_ids`` into visible (id, position) pairs and the hidden
    positions; the input sequence is left untouched.
    """
    token_ids = np.asarray(token_ids)
    if token_ids.shape != (mask.length,):
        raise ContractError(
            f"apply_mask: tokens shape {token_ids.shape} != mask length {mask.length}"
        )
    visible = mask.visible_positions
    return MaskedTokens(
        visible_ids=token_ids[visible],
        visible_positions=visible,
        masked_positions=mask.masked_positions,
    )
