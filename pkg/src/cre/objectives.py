"""Pre-training losses: masked-token reconstruction, InfoNCE, weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import engine as eg
from .engine import Tensor
from .errors import ContractError

# Large negative logit: exp(x - rowmax) underflows to exactly 0 for the
# self-similarity entries, excluding them from the InfoNCE denominator.
_NEG_INF_LOGIT = -1e9


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss values for one step; combined = reconstruction + lambda * contrastive."""

    reconstruction: float
    contrastive: float
    lambda_weight: float
    combined: float

    def __post_init__(self):
        expected = self.reconstruction + self.lambda_weight * self.contrastive
        if self.combined != expected:
            raise ContractError(
                f"combined {self.combined!r} != reconstruction + lambda * contrastive {expected!r}"
            )


def combined_loss(reconstruction: float, contrastive: float, lambda_weight: float) -> LossBreakdown:
    """Assemble a :class:`LossBreakdown`; with lambda 0 the combined loss is
    exactly the reconstruction loss.
    """
    if lambda_weight < 0:
        raise ContractError(f"lambda must be >= 0, got {lambda_weight}")
    rec = float(reconstruction)
    con = float(contrastive)
    lam = float(lambda_weight)
    return LossBreakdown(reconstruction=rec, contrastive=con,
                         lambda_weight=lam, combined=rec + lam * con)


def combine(reconstruction: Tensor, contrastive: Tensor, lambda_weight: float) -> Tensor:
    """Differentiable combined loss tensor ``rec + lambda * con``."""
    if lambda_weight < 0:
        raise ContractError(f"lambda must be >= 0, got {lambda_weight}")
    return eg.add(reconstruction, eg.scale(contrastive, lambda_weight))


def _lift_view(logits: Tensor, token_ids: np.ndarray, positions: np.ndarray):
    if logits.ndim == 2:
        logits = eg.reshape(logits, (1,) + logits.shape)
    token_ids = np.asarray(token_ids)
    if token_ids.ndim == 1:
        token_ids = token_ids[None, :]
    positions = np.asarray(positions)
    if positions.ndim == 1:
        positions = positions[None, :]
    return logits, token_ids, positions


def reconstruction_loss(view_logits: Sequence[Tensor],
                        view_token_ids: Sequence[np.ndarray],
                        view_masked_positions: Sequence[np.ndarray]) -> Tensor:
    """Cross-entropy against the true token ids, averaged over the masked
    positions of each view and then over views. Logits at unmasked positions
    never enter the computation.

    Each view contributes ``logits`` of shape (L, K) or (B, L, K), the token
    ids of that view's full sequence, and its masked positions.
    """
    n_views = len(view_logits)
    if n_views == 0 or not (n_views == len(view_token_ids) == len(view_masked_positions)):
        raise ContractError("reconstruction_loss: need aligned, nonempty per-view inputs")
    per_view = []
    for logits, ids, pos in zip(view_logits, view_token_ids, view_masked_positions):
        logits, ids, pos = _lift_view(logits, ids, pos)
        b, length, k = logits.shape
        if ids.shape != (b, length):
            raise ContractError(
                f"reconstruction_loss: token ids {ids.shape} do not match logits {logits.shape}"
            )
        if pos.shape[0] != b or pos.shape[1] < 1:
            raise ContractError("reconstruction_loss: each view needs >= 1 masked position")
        if pos.max() >= length:
            raise ContractError(f"reconstruction_loss: masked position {pos.max()} >= L={length}")
        masked_logits = eg.reshape(eg.gather_positions(logits, pos), (-1, k))
        targets = ids[np.arange(b)[:, None], pos].reshape(-1)
        per_view.append(eg.softmax_cross_entropy(masked_logits, targets))
    total = per_view[0]
    for extra in per_view[1:]:
        total = eg.add(total, extra)
    return eg.scale(total, 1.0 / n_views)


def infonce_loss(z: Tensor, temperature: float) -> Tensor:
    """Normalized-temperature cross entropy over in-batch similarities.

    Rows ``2i`` and ``2i+1`` of ``z`` (2B x D, unit-norm) are the two views
    of image ``i``. Every row is an anchor: its positive is its pair, the
    denominator runs over all other rows (self excluded), and the result is
    the mean over all 2B anchors.
    """
    if temperature <= 0:
        raise ContractError(f"infonce_loss: temperature must be positive, got {temperature}")
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2:
        raise ContractError(f"infonce_loss: need (2B, D) features with B >= 1, got {z.shape}")
    norms = np.sqrt((z.data * z.data).sum(axis=1))
    if np.abs(norms - 1.0).max() > 1e-4:
        raise ContractError("infonce_loss: feature rows must be unit-norm within 1e-4")
    n = z.shape[0]
    sims = eg.scale(eg.matmul(z, eg.transpose(z)), 1.0 / temperature)
    self_mask = Tensor(np.diag(np.full(n, _NEG_INF_LOGIT)).astype(z.dtype))
    anchors = np.arange(n)
    return eg.softmax_cross_entropy(eg.add(sims, self_mask), anchors ^ 1)
