"""Self-supervised pre-training on vector-quantized image tokens.

Masked-token reconstruction through a ViT encoder-decoder plus a weighted
InfoNCE contrastive branch, with linear-probe and fine-tuning evaluation.
Built on an in-package reverse-mode autodiff tensor engine.
"""

from . import engine
from .augment import AugmentConfig, bilinear_resize, make_two_views, random_hflip, random_resized_crop
from .config import RunConfig, config_from_dict, config_to_dict, load_config
from .data import (DatasetManifest, ImageRecord, load_image, load_manifest,
                   make_manifest, save_manifest, split_by_class)
from .engine import Tape, Tensor, backward, finite_diff_check
from .evaluate import (FinetuneConfig, Metrics, ProbeConfig, compute_metrics,
                       extract_features, finetune, linear_probe)
from .masking import MaskVector, apply_mask, sample_mask
from .model import (ModelConfig, ModelParameters, contrastive_feature, encode,
                    fill_and_decode, init_parameters, parameter_count)
from .objectives import LossBreakdown, combined_loss, infonce_loss, reconstruction_loss
from .tokenizer import (Codebook, TokenSequence, detokenize, fit_codebook, load_codebook,
                        quantization_error, save_codebook, tokenize)
from .trainer import (AdamWState, StepRecord, TrainConfig, adamw_step, effective_lr,
                      load_checkpoint, lr_at, pretrain, save_checkpoint)

__version__ = "0.1.0"

__all__ = [
    "AdamWState", "AugmentConfig", "Codebook", "DatasetManifest", "FinetuneConfig",
    "ImageRecord", "LossBreakdown", "MaskVector", "Metrics", "ModelConfig",
    "ModelParameters", "ProbeConfig", "RunConfig", "StepRecord", "Tape", "Tensor",
    "TokenSequence", "TrainConfig", "adamw_step", "apply_mask", "backward",
    "bilinear_resize", "combined_loss", "compute_metrics", "config_from_dict",
    "config_to_dict", "contrastive_feature", "detokenize", "effective_lr", "encode",
    "engine", "extract_features", "fill_and_decode", "finetune", "finite_diff_check",
    "fit_codebook", "infonce_loss", "init_parameters", "linear_probe", "load_checkpoint",
    "load_config", "load_image", "load_codebook", "load_manifest", "lr_at",
    "make_manifest", "make_two_views", "parameter_count", "pretrain",
    "quantization_error", "random_hflip", "random_resized_crop", "reconstruction_loss",
    "sample_mask", "save_checkpoint", "save_codebook", "save_manifest", "split_by_class",
    "tokenize",
]
