"""Downstream evaluation: frozen-feature linear probing, full fine-tuning,
and classification metrics (top-1 accuracy, macro-F1, confusion matrix).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import engine as eg
from . import model as mdl
from .augment import AugmentConfig, random_hflip, random_resized_crop
from .data import SPLIT_PRETRAIN, DatasetManifest, load_image
from .engine import Tape, Tensor
from .errors import ContractError
from .model import ModelConfig, ModelParameters
from .seeding import AUGMENT, FINETUNE, INIT, PROBE, derive_rng
from .tokenizer import Codebook, tokenize
from .trainer import AdamWState, TrainConfig, adamw_step, cosine_warmup_lr


@dataclass(frozen=True)
class ClassScore:
    label: str
    precision: float
    recall: float
    f1: float
    true_count: int
    predicted_count: int

    @property
    def empty(self) -> bool:
        """No true and no predicted samples; F1 is 0 by convention."""
        return self.true_count == 0 and self.predicted_count == 0


@dataclass(frozen=True)
class Metrics:
    top1_accuracy: float
    macro_f1: float
    per_class: tuple[ClassScore, ...]
    confusion: np.ndarray  # (C, C) counts, rows = true class, cols = predicted

    def to_json_dict(self) -> dict:
        return {
            "top1": self.top1_accuracy,
            "macro_f1": self.macro_f1,
            "per_class": [
                {"label": c.label, "precision": c.precision, "recall": c.recall,
                 "f1": c.f1, "true_count": c.true_count,
                 "predicted_count": c.predicted_count, "empty": c.empty}
                for c in self.per_class
            ],
            "confusion": self.confusion.tolist(),
        }

    def to_table(self) -> str:
        lines = [
            f"top-1 accuracy: {self.top1_accuracy:.4f}",
            f"macro F1:       {self.macro_f1:.4f}",
            "",
            f"{'class':<20} {'prec':>7} {'recall':>7} {'f1':>7} {'true':>6} {'pred':>6}",
        ]
        for c in self.per_class:
            flag = "  (empty)" if c.empty else ""
            lines.append(f"{c.label:<20} {c.precision:7.4f} {c.recall:7.4f} "
                         f"{c.f1:7.4f} {c.true_count:6d} {c.predicted_count:6d}{flag}")
        return "\n".join(lines)


def compute_metrics(predictions, labels, n_classes: int,
                    class_names: tuple[str, ...] | None = None) -> Metrics:
    """Top-1 accuracy, per-class F1 (0/0 := 0), macro-F1, confusion counts."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise ContractError(
            f"predictions {predictions.shape} and labels {labels.shape} must be equal-length vectors"
        )
    if labels.size and (labels.max() >= n_classes or predictions.max() >= n_classes):
        raise ContractError("class index out of range")
    if class_names is None:
        class_names = tuple(str(i) for i in range(n_classes))
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    scores = []
    for c in range(n_classes):
        tp = confusion[c, c]
        true_count = int(confusion[c].sum())
        pred_count = int(confusion[:, c].sum())
        precision = tp / pred_count if pred_count else 0.0
        recall = tp / true_count if true_count else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        scores.append(ClassScore(label=class_names[c], precision=float(precision),
                                 recall=float(recall), f1=float(f1),
                                 true_count=true_count, predicted_count=pred_count))
    top1 = float(np.trace(confusion) / labels.size) if labels.size else 0.0
    macro = float(np.mean([s.f1 for s in scores])) if scores else 0.0
    return Metrics(top1_accuracy=top1, macro_f1=macro, per_class=tuple(scores),
                   confusion=confusion)


def write_metrics(metrics: Metrics, json_path, table_path=None) -> None:
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(metrics.to_json_dict(), fh, indent=2)
        fh.write("\n")
    if table_path is not None:
        with open(table_path, "w", encoding="utf-8") as fh:
            fh.write(metrics.to_table() + "\n")


# --------------------------------------------------------------------------
# Feature extraction
# --------------------------------------------------------------------------


def encode_full_sequence(images: np.ndarray, params: ModelParameters,
                         codebook: Codebook, cfg: ModelConfig) -> Tensor:
    """Unmasked encoder pass over a stack of images; (B, L, E) latents."""
    ids = np.stack([tokenize(img, codebook).ids for img in images])
    positions = np.broadcast_to(np.arange(cfg.seq_len), ids.shape)
    return mdl.encode(ids, positions, params, cfg)


def extract_features(images, params: ModelParameters, codebook: Codebook,
                     cfg: ModelConfig, batch_size: int = 128) -> np.ndarray:
    """Deterministic (N, embed_dim) features: tokenize, full-sequence encoder
    pass with no masking, then global average over tokens.
    """
    images = np.asarray(images, dtype=np.float32)
    rows = []
    for start in range(0, images.shape[0], batch_size):
        latent = encode_full_sequence(images[start:start + batch_size], params, codebook, cfg)
        rows.append(latent.data.mean(axis=1))
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, cfg.embed_dim), np.float32)


def load_split_images(manifest: DatasetManifest, size: tuple[int, int]):
    """Decode all manifest images at ``size``; returns (images, labels, is_pretrain)."""
    images, labels, is_pretrain = [], [], []
    for rec in manifest.records:
        images.append(load_image(rec.path, size=size))
        labels.append(rec.label)
        is_pretrain.append(rec.split == SPLIT_PRETRAIN)
    return (np.stack(images) if images else np.zeros((0, size[0], size[1], 3), np.float32),
            np.asarray(labels, dtype=np.int64), np.asarray(is_pretrain, dtype=bool))


# --------------------------------------------------------------------------
# Linear probe
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("probe needs epochs >= 1 and batch_size >= 1")


def _head_init(in_dim: int, n_classes: int, seed: int, tag: int) -> ModelParameters:
    rng = derive_rng(seed, tag, INIT)
    w = mdl.truncated_normal(rng, (in_dim, n_classes), 0.02, np.float32)
    return {"cls.w": Tensor(w, requires_grad=True),
            "cls.b": Tensor(np.zeros(n_classes, np.float32), requires_grad=True)}


def _train_head_on_features(features: np.ndarray, labels: np.ndarray,
                            train_mask: np.ndarray, n_classes: int,
                            cfg: ProbeConfig, seed_tag: int) -> ModelParameters:
    train_x = features[train_mask]
    train_y = labels[train_mask]
    if train_x.shape[0] == 0:
        raise ContractError("no training-split samples to fit the classifier head")
    head = _head_init(features.shape[1], n_classes, cfg.seed, seed_tag)
    opt_cfg = TrainConfig(base_lr=cfg.lr, batch_size=max(cfg.batch_size, 2),
                          total_epochs=max(cfg.epochs, 2), warmup_epochs=0,
                          weight_decay=cfg.weight_decay, seed=cfg.seed)
    state = AdamWState.for_params(head)
    decay_mults = {n: 0.0 if p.ndim == 1 else 1.0 for n, p in head.items()}
    for epoch in range(cfg.epochs):
        order = derive_rng(cfg.seed, seed_tag, epoch).permutation(train_x.shape[0])
        for start in range(0, train_x.shape[0], cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = Tensor(train_x[idx])
            eg.zero_grads(head.values())
            with Tape() as tape:
                loss = eg.softmax_cross_entropy(
                    eg.linear(x, head["cls.w"], head["cls.b"]), train_y[idx])
            eg.backward(loss, tape)
            adamw_step(head, state, cfg.lr, opt_cfg, decay_mults)
    return head


def head_predictions(features: np.ndarray, head: ModelParameters) -> np.ndarray:
    logits = features @ head["cls.w"].data + head["cls.b"].data
    return logits.argmax(axis=1)


def linear_probe(features: np.ndarray, labels: np.ndarray, is_pretrain: np.ndarray,
                 n_classes: int, cfg: ProbeConfig,
                 class_names: tuple[str, ...] | None = None) -> tuple[Metrics, ModelParameters]:
    """Train one affine layer on frozen pretrain-split features, score on the
    test split. The encoder is never touched: only precomputed features enter.
    """
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels)
    is_pretrain = np.asarray(is_pretrain, dtype=bool)
    if not (features.shape[0] == labels.shape[0] == is_pretrain.shape[0]):
        raise ContractError("features, labels, and split flags must align")
    missing = set(range(n_classes)) - set(labels[is_pretrain].tolist())
    if missing:
        # Scored anyway; absent classes get F1 0 through the 0/0 convention.
        warnings.warn(f"classes absent from probe training split: {sorted(missing)}")
    head = _train_head_on_features(features, labels, is_pretrain, n_classes, cfg, PROBE)
    test_mask = ~is_pretrain
    preds = head_predictions(features[test_mask], head)
    return compute_metrics(preds, labels[test_mask], n_classes, class_names), head


# --------------------------------------------------------------------------
# Fine-tuning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 1e-3
    epochs: int = 15
    batch_size: int = 64
    warmup_epochs: int = 1
    weight_decay: float = 0.05
    seed: int = 0
    freeze_encoder: bool = False
    augment: bool = True

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < max(self.epochs, 1):
            raise ContractError("need 0 <= warmup_epochs < epochs")


def _finetune_forward(images: np.ndarray, params: ModelParameters,
                      head: ModelParameters, codebook: Codebook,
                      cfg: ModelConfig, targets: np.ndarray) -> Tensor:
    latent = encode_full_sequence(images, params, codebook, cfg)
    pooled = eg.mean(latent, axis=1)
    logits = eg.linear(pooled, head["cls.w"], head["cls.b"])
    return eg.softmax_cross_entropy(logits, targets)


def finetune(manifest: DatasetManifest, params: ModelParameters, codebook: Codebook,
             model_cfg: ModelConfig, cfg: FinetuneConfig, image_hw: tuple[int, int],
             aug_cfg: AugmentConfig | None = None
             ) -> tuple[Metrics, ModelParameters]:
    """Attach a classification head and train on the pretrain split, scoring
    on the test split. With ``freeze_encoder`` only the head trains on fixed
    features, reproducing the linear-probe protocol under this config.
    """
    n_classes = len(manifest.class_names)
    size = tuple(image_hw)
    images, labels, is_pretrain = load_split_images(manifest, size)

    if cfg.freeze_encoder:
        features = extract_features(images, params, codebook, model_cfg)
        head = _train_head_on_features(
            features, labels, is_pretrain, n_classes,
            ProbeConfig(lr=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch_size,
                        weight_decay=cfg.weight_decay, seed=cfg.seed),
            FINETUNE)
        preds = head_predictions(features[~is_pretrain], head)
        merged = dict(params)
        merged.update(head)
        return compute_metrics(preds, labels[~is_pretrain], n_classes,
                               manifest.class_names), merged

    head = _head_init(model_cfg.embed_dim, n_classes, cfg.seed, FINETUNE)
    trainable: ModelParameters = dict(params)
    trainable.update(head)
    decay_mults = {n: mdl.weight_decay_multiplier(n, p.shape, model_cfg)
                   for n, p in trainable.items()}
    opt_cfg = TrainConfig(base_lr=cfg.lr, batch_size=max(cfg.batch_size, 2),
                          total_epochs=max(cfg.epochs, 2), warmup_epochs=0,
                          weight_decay=cfg.weight_decay, seed=cfg.seed)
    state = AdamWState.for_params(trainable)
    train_idx = np.flatnonzero(is_pretrain)
    steps_per_epoch = max(1, math.ceil(train_idx.size / cfg.batch_size))
    aug = aug_cfg or AugmentConfig(out_h=size[0], out_w=size[1])
    step = 0
    for epoch in range(cfg.epochs):
        order = derive_rng(cfg.seed, FINETUNE, epoch).permutation(train_idx.size)
        for start in range(0, train_idx.size, cfg.batch_size):
            idx = train_idx[order[start:start + cfg.batch_size]]
            batch = images[idx]
            if cfg.augment:
                rng_pool = [derive_rng(cfg.seed, FINETUNE, AUGMENT, epoch, int(i)) for i in idx]
                batch = np.stack([
                    random_hflip(random_resized_crop(img, aug, rng), aug.hflip_p, rng)
                    for img, rng in zip(batch, rng_pool)
                ])
            eg.zero_grads(trainable.values())
            with Tape() as tape:
                loss = _finetune_forward(batch, params, head, codebook, model_cfg, labels[idx])
            eg.backward(loss, tape)
            step += 1
            lr = cosine_warmup_lr(step / steps_per_epoch, cfg.lr,
                                  cfg.warmup_epochs, cfg.epochs)
            adamw_step(trainable, state, lr, opt_cfg, decay_mults)

    features = extract_features(images[~is_pretrain], params, codebook, model_cfg)
    preds = head_predictions(features, head)
    return compute_metrics(preds, labels[~is_pretrain], n_classes,
                           manifest.class_names), trainable
