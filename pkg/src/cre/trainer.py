"""AdamW optimization, warmup+cosine schedule, pre-training loop, checkpoints.

Batch order, augmentations, and masks are all pure functions of
``(seed, epoch, image index)``, so a run resumed from a checkpoint replays
the exact step stream of an uninterrupted run.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import engine as eg
from . import model as mdl
from .augment import AugmentConfig, make_two_views
from .data import SPLIT_PRETRAIN, DatasetManifest, load_image
from .engine import Tape, Tensor
from .errors import ContractError, FormatError, ImageDecodeError
from .masking import apply_mask, sample_mask
from .model import ModelConfig, ModelParameters
from .objectives import LossBreakdown, combine, combined_loss, infonce_loss, reconstruction_loss
from .seeding import AUGMENT, MASK, ORDER, derive_rng, derive_seed
from .tokenizer import Codebook, tokenize

_CKPT_MAGIC = b"CRE1"
_CKPT_VERSION = 1
_CONFIG_TENSOR = "meta.config_json"


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1.5e-4
    batch_size: int = 64
    total_epochs: int = 100
    warmup_epochs: int = 5
    lambda_weight: float = 0.2
    mask_ratio: float = 0.55
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0   # epochs between checkpoints; 0 = final only
    max_steps: int | None = None  # optional hard cap, for fixed-step runs

    def __post_init__(self):
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2 (the contrastive loss needs a negative)")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ContractError(
                f"need 0 <= warmup_epochs < total_epochs, got {self.warmup_epochs}/{self.total_epochs}"
            )
        if self.lambda_weight < 0 or not 0.0 < self.mask_ratio < 1.0:
            raise ContractError("lambda must be >= 0 and mask ratio inside (0, 1)")


def effective_lr(cfg: TrainConfig) -> float:
    """Base learning rate scaled by batch_size / 256."""
    return cfg.base_lr * cfg.batch_size / 256.0


def cosine_warmup_lr(epoch_fraction: float, peak_lr: float,
                     warmup_epochs: float, total_epochs: float) -> float:
    """Linear ramp 0 -> peak over the warmup, then half-cosine decay to 0."""
    if not 0.0 <= epoch_fraction <= total_epochs:
        raise ContractError(
            f"epoch fraction {epoch_fraction} outside [0, {total_epochs}]"
        )
    if warmup_epochs > 0 and epoch_fraction < warmup_epochs:
        return peak_lr * epoch_fraction / warmup_epochs
    progress = (epoch_fraction - warmup_epochs) / (total_epochs - warmup_epochs)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_at(epoch_fraction: float, cfg: TrainConfig) -> float:
    return cosine_warmup_lr(epoch_fraction, effective_lr(cfg),
                            cfg.warmup_epochs, cfg.total_epochs)


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParameters) -> "AdamWState":
        return cls(m={n: np.zeros_like(p.data) for n, p in params.items()},
                   v={n: np.zeros_like(p.data) for n, p in params.items()})


def adamw_step(params: ModelParameters, state: AdamWState, lr: float,
               cfg: TrainConfig, decay_multipliers: dict | None = None) -> None:
    """One decoupled-weight-decay Adam update with bias correction.

    ``decay_multipliers`` maps parameter names to a scalar or broadcastable
    array scaling the decay (0 exempts the tensor). Aborts with diagnostics
    if any gradient is non-finite; parameters are untouched in that case.
    """
    grads = {}
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"adamw_step: parameter '{name}' has no gradient")
        if p.grad.shape != p.data.shape:
            raise ContractError(
                f"adamw_step: gradient shape {p.grad.shape} != parameter shape "
                f"{p.data.shape} for '{name}'"
            )
        if not np.isfinite(p.grad).all():
            raise ContractError(f"adamw_step: non-finite gradient in '{name}'; step aborted")
        grads[name] = p.grad
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        mult = 1.0 if decay_multipliers is None else decay_multipliers.get(name, 1.0)
        if cfg.weight_decay:
            p.data *= (1.0 - lr * cfg.weight_decay * np.asarray(mult, dtype=p.data.dtype))
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + p.data.dtype.type(cfg.eps))


@dataclass(frozen=True)
class StepRecord:
    epoch: int
    step: int
    reconstruction: float
    contrastive: float
    combined: float
    lr: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TwoViewBatch:
    """Stacked per-view arrays for one step (counts are uniform across the batch)."""

    token_ids: list[np.ndarray]         # per view: (B, L)
    visible_ids: list[np.ndarray]       # per view: (B, V)
    visible_positions: list[np.ndarray]  # per view: (B, V)
    masked_positions: list[np.ndarray]   # per view: (B, M)


def step_loss(batch: TwoViewBatch, params: ModelParameters, cfg: ModelConfig,
              lambda_weight: float) -> tuple[Tensor, Tensor, Tensor]:
    """Forward pass of both views; returns (combined, reconstruction, contrastive)."""
    logits, latents = [], []
    for view in range(2):
        lat = mdl.encode(batch.visible_ids[view], batch.visible_positions[view], params, cfg)
        latents.append(lat)
        logits.append(mdl.fill_and_decode(lat, batch.visible_positions[view],
                                          batch.masked_positions[view], params, cfg))
    rec = reconstruction_loss(logits, batch.token_ids, batch.masked_positions)
    z1 = mdl.contrastive_feature(latents[0], params)
    z2 = mdl.contrastive_feature(latents[1], params)
    b = z1.shape[0]
    z = eg.reshape(eg.concatenate([eg.reshape(z1, (b, 1, -1)),
                                   eg.reshape(z2, (b, 1, -1))], axis=1), (2 * b, -1))
    con = infonce_loss(z, cfg.temperature)
    return combine(rec, con, lambda_weight), rec, con


class _ImageCache:
    """Decode-once cache; failures are remembered, counted, and re-raised."""

    def __init__(self):
        self._images: dict[str, np.ndarray] = {}
        self._failed: set[str] = set()
        self.attempted = 0
        self.failures = 0

    def get(self, path: str) -> np.ndarray:
        if path in self._images:
            return self._images[path]
        self.attempted += 1
        if path in self._failed:
            self.failures += 1
            raise ImageDecodeError(f"{path}: previously failed to decode")
        try:
            img = load_image(path)
        except ImageDecodeError:
            self._failed.add(path)
            self.failures += 1
            raise
        self._images[path] = img
        return img


def _assemble_batch(records, indices, cache: _ImageCache, codebook: Codebook,
                    train_cfg: TrainConfig, aug_cfg: AugmentConfig,
                    epoch: int, seq_len: int) -> TwoViewBatch:
    per_view: list[list[list[np.ndarray]]] = [[[], [], [], []] for _ in range(2)]
    kept = 0
    for gi in indices:
        rec = records[gi]
        try:
            image = cache.get(rec.path)
        except ImageDecodeError:
            if cache.failures > 0.10 * max(cache.attempted, 20):
                raise ContractError(
                    f"aborting: {cache.failures}/{cache.attempted} image decode failures (> 10%)"
                ) from None
            continue
        views = make_two_views(image, aug_cfg, derive_rng(train_cfg.seed, AUGMENT, epoch, gi))
        for view, img in enumerate(views):
            tokens = tokenize(img, codebook)
            mask = sample_mask(seq_len, train_cfg.mask_ratio,
                               derive_seed(train_cfg.seed, MASK, epoch, gi, view))
            parts = apply_mask(tokens.ids, mask)
            per_view[view][0].append(tokens.ids)
            per_view[view][1].append(parts.visible_ids)
            per_view[view][2].append(parts.visible_positions)
            per_view[view][3].append(parts.masked_positions)
        kept += 1
    if kept < 2:
        raise ContractError("fewer than 2 decodable images in batch")
    return TwoViewBatch(
        token_ids=[np.stack(per_view[v][0]) for v in range(2)],
        visible_ids=[np.stack(per_view[v][1]) for v in range(2)],
        visible_positions=[np.stack(per_view[v][2]) for v in range(2)],
        masked_positions=[np.stack(per_view[v][3]) for v in range(2)],
    )


def pretrain(manifest: DatasetManifest, codebook: Codebook, params: ModelParameters,
             model_cfg: ModelConfig, train_cfg: TrainConfig, aug_cfg: AugmentConfig,
             opt_state: AdamWState | None = None, log_file=None,
             checkpoint_path=None) -> list[StepRecord]:
    """Run the self-supervised pre-training loop and return per-step records.

    Resumes from ``opt_state.step`` when a loaded optimizer state is passed;
    the replayed randomness matches the uninterrupted run step for step.
    Writes JSON Lines records to ``log_file`` (a file object) if given, and
    checkpoints to ``checkpoint_path`` at the configured cadence.
    """
    records = manifest.subset(SPLIT_PRETRAIN)
    if not records:
        raise ContractError("pretrain: manifest has no records in the pretrain split")
    if train_cfg.batch_size > len(records):
        raise ContractError(
            f"batch_size {train_cfg.batch_size} exceeds pretrain split size {len(records)}"
        )
    steps_per_epoch = len(records) // train_cfg.batch_size
    total_steps = train_cfg.total_epochs * steps_per_epoch
    if train_cfg.max_steps is not None:
        total_steps = min(total_steps, train_cfg.max_steps)

    if opt_state is None:
        opt_state = AdamWState.for_params(params)
    decay_mults = {n: mdl.weight_decay_multiplier(n, p.shape, model_cfg)
                   for n, p in params.items()}
    cache = _ImageCache()
    history: list[StepRecord] = []
    configs = {"model": asdict(model_cfg), "train": asdict(train_cfg), "augment": asdict(aug_cfg)}

    for step in range(opt_state.step, total_steps):
        epoch = step // steps_per_epoch
        slot = step % steps_per_epoch
        order = derive_rng(train_cfg.seed, ORDER, epoch).permutation(len(records))
        indices = order[slot * train_cfg.batch_size:(slot + 1) * train_cfg.batch_size]
        batch = _assemble_batch(records, indices, cache, codebook, train_cfg, aug_cfg,
                                epoch, model_cfg.seq_len)
        eg.zero_grads(params.values())
        with Tape() as tape:
            total, rec, con = step_loss(batch, params, model_cfg, train_cfg.lambda_weight)
        eg.backward(total, tape)
        lr = lr_at((step + 1) / steps_per_epoch, train_cfg)
        adamw_step(params, opt_state, lr, train_cfg, decay_mults)
        breakdown = combined_loss(rec.item(), con.item(), train_cfg.lambda_weight)
        record = StepRecord(epoch=epoch, step=step, reconstruction=breakdown.reconstruction,
                            contrastive=breakdown.contrastive, combined=breakdown.combined, lr=lr)
        history.append(record)
        if log_file is not None:
            log_file.write(record.to_json() + "\n")
        end_of_epoch = slot == steps_per_epoch - 1
        if checkpoint_path is not None and train_cfg.checkpoint_every and end_of_epoch \
                and (epoch + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, params, opt_state, configs)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, opt_state, configs)
    return history


# --------------------------------------------------------------------------
# Checkpoint format: magic "CRE1", version u16, tensor count u32, then per
# tensor: name length u16 + UTF-8 name, ndim u8, dims as u64, float32 LE
# payload. The run configuration rides along as a byte-valued tensor.
# --------------------------------------------------------------------------


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, params: ModelParameters, opt_state: AdamWState,
                    configs: dict) -> None:
    """Serialize parameters, optimizer state, and a config echo; lossless."""
    tensors: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in params.items()]
    tensors += [(f"opt.m.{n}", a) for n, a in opt_state.m.items()]
    tensors += [(f"opt.v.{n}", a) for n, a in opt_state.v.items()]
    tensors.append(("opt.step", np.array([opt_state.step], dtype=np.float32)))
    config_bytes = np.frombuffer(json.dumps(configs).encode("utf-8"), dtype=np.uint8)
    tensors.append((_CONFIG_TENSOR, config_bytes.astype(np.float32)))
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<HI", _CKPT_VERSION, len(tensors)))
        for name, arr in tensors:
            _write_tensor(fh, name, arr)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Raw tensors plus the decoded config echo."""
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    offset = 10
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            dims = struct.unpack_from(f"<{ndim}Q", raw, offset)
            offset += 8 * ndim
            size = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=size, offset=offset).reshape(dims)
            offset += 4 * size
        except (struct.error, ValueError) as exc:
            raise FormatError(f"{path}: truncated or corrupt checkpoint: {exc}") from None
        tensors[name] = arr.copy()
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after tensor data")
    if _CONFIG_TENSOR not in tensors:
        raise FormatError(f"{path}: missing config echo tensor")
    config = json.loads(bytes(tensors.pop(_CONFIG_TENSOR).astype(np.uint8)).decode("utf-8"))
    return tensors, config


def load_checkpoint(path, model_cfg: ModelConfig) -> tuple[ModelParameters, AdamWState, dict]:
    """Rebuild parameters and optimizer state, validating every tensor shape
    against ``model_cfg`` before anything is returned.
    """
    tensors, config = read_checkpoint(path)
    params: ModelParameters = {}
    for name, shape, _ in mdl._parameter_specs(model_cfg):
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor '{name}'")
        arr = tensors[name]
        if arr.shape != shape:
            raise FormatError(
                f"{path}: tensor '{name}' has shape {arr.shape}, config expects {shape}"
            )
        params[name] = Tensor(arr, requires_grad=True)
    state = AdamWState.for_params(params)
    for name in params:
        for prefix, store in (("opt.m.", state.m), ("opt.v.", state.v)):
            key = prefix + name
            if key not in tensors:
                raise FormatError(f"{path}: missing tensor '{key}'")
            if tensors[key].shape != params[name].shape:
                raise FormatError(f"{path}: tensor '{key}' has shape {tensors[key].shape}, "
                                  f"parameter is {params[name].shape}")
            store[name] = tensors[key]
    if "opt.step" not in tensors:
        raise FormatError(f"{path}: missing tensor 'opt.step'")
    state.step = int(tensors["opt.step"][0])
    return params, state, config
