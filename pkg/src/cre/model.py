"""Token-level ViT encoder-decoder with a learnable mask token.

The encoder attends over visible tokens only. The decoder sees the full
sequence: encoder outputs at visible positions, mask-token embedding plus
positional embedding at hidden positions, and predicts a distribution over
the codebook at every position. A two-layer MLP head on the pooled encoder
output yields the normalized contrastive feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfinv, ndtr

from . import engine as eg
from .engine import Tensor
from .errors import ContractError
from .seeding import INIT, derive_rng


@dataclass(frozen=True)
class ModelConfig:
    k: int                      # codebook size; token id k is the mask token
    seq_len: int                # L, tokens per image
    embed_dim: int = 64
    encoder_depth: int = 4
    decoder_depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    contrastive_dim: int = 32
    temperature: float = 0.2

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ContractError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ContractError("encoder_depth and decoder_depth must be >= 1")
        if self.k < 2 or self.seq_len < 2:
            raise ContractError("need k >= 2 and seq_len >= 2")
        if self.temperature <= 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        if self.mlp_ratio <= 0 or self.contrastive_dim < 1:
            raise ContractError("mlp_ratio must be positive and contrastive_dim >= 1")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


ModelParameters = dict[str, Tensor]


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """N(0, std^2) truncated at +/-2 std, via inverse-CDF sampling."""
    lo, hi = ndtr(-2.0), ndtr(2.0)
    u = rng.uniform(lo, hi, size=shape)
    return (np.sqrt(2.0) * erfinv(2.0 * u - 1.0) * std).astype(dtype)


def _block_names(prefix: str, cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    e, h = cfg.embed_dim, cfg.mlp_hidden
    return [
        (f"{prefix}.ln1.gain", (e,), "ones"),
        (f"{prefix}.ln1.bias", (e,), "zeros"),
        (f"{prefix}.attn.wq", (e, e), "tn"),
        (f"{prefix}.attn.bq", (e,), "zeros"),
        # No key bias: softmax is invariant to a constant shift per score
        # row, so a key bias is exactly untrainable dead weight.
        (f"{prefix}.attn.wk", (e, e), "tn"),
        (f"{prefix}.attn.wv", (e, e), "tn"),
        (f"{prefix}.attn.bv", (e,), "zeros"),
        (f"{prefix}.attn.wo", (e, e), "tn"),
        (f"{prefix}.attn.bo", (e,), "zeros"),
        (f"{prefix}.ln2.gain", (e,), "ones"),
        (f"{prefix}.ln2.bias", (e,), "zeros"),
        (f"{prefix}.mlp.w1", (e, h), "tn"),
        (f"{prefix}.mlp.b1", (h,), "zeros"),
        (f"{prefix}.mlp.w2", (h, e), "tn"),
        (f"{prefix}.mlp.b2", (e,), "zeros"),
    ]


def _parameter_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    e = cfg.embed_dim
    specs = [
        ("token_embed", (cfg.k + 1, e), "tn"),  # row k is the learnable mask token
        ("pos_embed", (cfg.seq_len, e), "tn"),
    ]
    for i in range(cfg.encoder_depth):
        specs += _block_names(f"enc.{i}", cfg)
    specs += [("enc.norm.gain", (e,), "ones"), ("enc.norm.bias", (e,), "zeros")]
    for i in range(cfg.decoder_depth):
        specs += _block_names(f"dec.{i}", cfg)
    specs += [
        ("dec.norm.gain", (e,), "ones"),
        ("dec.norm.bias", (e,), "zeros"),
        ("dec.out.w", (e, cfg.k), "tn"),
        ("dec.out.b", (cfg.k,), "zeros"),
        ("head.w1", (e, e), "tn"),
        ("head.b1", (e,), "zeros"),
        ("head.w2", (e, cfg.contrastive_dim), "tn"),
        ("head.b2", (cfg.contrastive_dim,), "zeros"),
    ]
    return specs


def init_parameters(cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelParameters:
    """Fresh parameters: truncated-normal (std 0.02) weights, zero biases,
    unit norm gains. Bitwise deterministic per seed.
    """
    rng = derive_rng(seed, INIT)
    params: ModelParameters = {}
    for name, shape, kind in _parameter_specs(cfg):
        if kind == "tn":
            data = truncated_normal(rng, shape, 0.02, dtype)
        elif kind == "ones":
            data = np.ones(shape, dtype=dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        params[name] = Tensor(data, requires_grad=True)
    return params


def parameter_count(params: ModelParameters) -> int:
    return int(np.sum([t.size for t in params.values()]))


def weight_decay_multiplier(name: str, shape: tuple[int, ...], cfg: ModelConfig):
    """Per-parameter decay factor: 0 for biases/norm gains/positional
    embeddings, a row mask excluding the mask token for the embedding table,
    1 otherwise.
    """
    if len(shape) == 1 or name == "pos_embed":
        return 0.0
    if name == "token_embed":
        mult = np.ones((shape[0], 1), dtype=np.float32)
        mult[cfg.k] = 0.0
        return mult
    return 1.0


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, t, e = x.shape
    return eg.transpose(eg.reshape(x, (b, t, num_heads, e // num_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, nh, t, hd = x.shape
    return eg.reshape(eg.transpose(x, (0, 2, 1, 3)), (b, t, nh * hd))


def _transformer_block(x: Tensor, params: ModelParameters, prefix: str,
                       num_heads: int) -> Tensor:
    h = eg.layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    q = _split_heads(eg.linear(h, params[f"{prefix}.attn.wq"], params[f"{prefix}.attn.bq"]), num_heads)
    k = _split_heads(eg.linear(h, params[f"{prefix}.attn.wk"]), num_heads)
    v = _split_heads(eg.linear(h, params[f"{prefix}.attn.wv"], params[f"{prefix}.attn.bv"]), num_heads)
    att = _merge_heads(eg.scaled_dot_product_attention(q, k, v))
    x = eg.add(x, eg.linear(att, params[f"{prefix}.attn.wo"], params[f"{prefix}.attn.bo"]))
    h = eg.layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    m = eg.linear(eg.gelu(eg.linear(h, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"])),
                  params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])
    return eg.add(x, m)


def _as_batched(ids) -> tuple[np.ndarray, bool]:
    arr = np.asarray(ids)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise ContractError(f"expected 1-d or 2-d index array, got shape {arr.shape}")


def encode(visible_ids, visible_positions, params: ModelParameters,
           cfg: ModelConfig) -> Tensor:
    """Encoder pass over visible tokens only.

    ``visible_ids`` and ``visible_positions`` are (V,) or (B, V) integer
    arrays; output is (V, E) or (B, V, E). The mask token id ``k`` must not
    appear here: mask filling belongs to the decoder path.
    """
    ids, squeeze = _as_batched(visible_ids)
    pos, _ = _as_batched(visible_positions)
    if ids.shape != pos.shape:
        raise ContractError(f"ids shape {ids.shape} != positions shape {pos.shape}")
    if ids.size and ids.max() >= cfg.k:
        raise ContractError(
            f"encoder input contains id >= K={cfg.k} (the mask token never enters the encoder)"
        )
    if ids.shape[1] < 1:
        raise ContractError("encode: need at least one visible token")
    x = eg.add(eg.embedding(params["token_embed"], ids),
               eg.embedding(params["pos_embed"], pos))
    for i in range(cfg.encoder_depth):
        x = _transformer_block(x, params, f"enc.{i}", cfg.num_heads)
    x = eg.layer_norm(x, params["enc.norm.gain"], params["enc.norm.bias"])
    return eg.reshape(x, x.shape[1:]) if squeeze else x


def fill_and_decode(latent: Tensor, visible_positions, masked_positions,
                    params: ModelParameters, cfg: ModelConfig) -> Tensor:
    """Assemble the full sequence and decode to per-position codebook logits.

    Visible positions carry the encoder outputs; masked positions get the
    mask-token embedding plus their positional embedding. Together the two
    position sets must partition 0..L-1. Returns (L, K) or (B, L, K).
    """
    squeeze = False
    if latent.ndim == 2:
        latent = eg.reshape(latent, (1,) + latent.shape)
        squeeze = True
    vis, _ = _as_batched(visible_positions)
    msk = np.asarray(masked_positions)
    if msk.size:
        msk, _ = _as_batched(msk)
    else:
        msk = np.zeros((vis.shape[0], 0), dtype=np.int64)
    if vis.shape[0] != latent.shape[0] or vis.shape[1] != latent.shape[1]:
        raise ContractError(
            f"visible positions {vis.shape} do not match latent {latent.shape}"
        )
    perm = np.concatenate([vis, msk], axis=1)
    if perm.shape[1] != cfg.seq_len or (np.sort(perm, axis=1) != np.arange(cfg.seq_len)).any():
        raise ContractError(
            "visible + masked positions must partition 0..L-1 (collision or gap)"
        )

    if msk.shape[1]:
        mask_ids = np.full(msk.shape, cfg.k, dtype=np.int64)
        mask_tok = eg.add(eg.embedding(params["token_embed"], mask_ids),
                          eg.embedding(params["pos_embed"], msk))
        seq = eg.concatenate([latent, mask_tok], axis=1)
    else:
        seq = latent
    x = eg.gather_positions(seq, np.argsort(perm, axis=1))
    for i in range(cfg.decoder_depth):
        x = _transformer_block(x, params, f"dec.{i}", cfg.num_heads)
    x = eg.layer_norm(x, params["dec.norm.gain"], params["dec.norm.bias"])
    logits = eg.linear(x, params["dec.out.w"], params["dec.out.b"])
    return eg.reshape(logits, logits.shape[1:]) if squeeze else logits


def contrastive_feature(latent: Tensor, params: ModelParameters) -> Tensor:
    """Mean over visible tokens -> two-layer MLP -> unit-norm feature.

    Accepts (V, E) or (B, V, E); returns (contrastive_dim,) or (B, ...).
    """
    squeeze = False
    if latent.ndim == 2:
        latent = eg.reshape(latent, (1,) + latent.shape)
        squeeze = True
    if latent.shape[1] < 1:
        raise ContractError("contrastive_feature: need at least one visible token")
    pooled = eg.mean(latent, axis=1)
    h = eg.gelu(eg.linear(pooled, params["head.w1"], params["head.b1"]))
    z = eg.l2_normalize(eg.linear(h, params["head.w2"], params["head.b2"]))
    return eg.reshape(z, z.shape[1:]) if squeeze else z
