"""Run configuration: one JSON document covering every module's settings.

Every field is validated up front and unknown keys are rejected anywhere in
the document. The resolved configuration (defaults materialized) is echoed
into each run's output directory and can itself be loaded as a config.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .errors import ContractError, FormatError
from .evaluate import FinetuneConfig, ProbeConfig
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class TokenizerSettings:
    k: int = 64
    patch_size: int = 4
    max_patches: int = 200_000
    codebook: str | None = None  # path; defaults to <out_dir>/codebook.creq

    def __post_init__(self):
        if self.k < 2 or self.patch_size < 1 or self.max_patches < self.k:
            raise ContractError("tokenizer needs k >= 2, patch_size >= 1, max_patches >= k")


@dataclass(frozen=True)
class ModelSettings:
    embed_dim: int = 64
    encoder_depth: int = 4
    decoder_depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    contrastive_dim: int = 32
    temperature: float = 0.2


@dataclass(frozen=True)
class AugmentSettings:
    scale_min: float = 0.2
    scale_max: float = 1.0
    aspect_min: float = 0.75
    aspect_max: float = 4.0 / 3.0
    hflip_p: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    manifest: str | None = None
    out_dir: str = "runs/cre"
    image_size: int = 32
    split_ratio: float = 0.8
    tokenizer: TokenizerSettings = field(default_factory=TokenizerSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentSettings = field(default_factory=AugmentSettings)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def __post_init__(self):
        if self.image_size % self.tokenizer.patch_size:
            raise ContractError(
                f"image_size {self.image_size} not divisible by patch_size "
                f"{self.tokenizer.patch_size}"
            )

    @property
    def seq_len(self) -> int:
        return (self.image_size // self.tokenizer.patch_size) ** 2

    def model_config(self) -> ModelConfig:
        return ModelConfig(k=self.tokenizer.k, seq_len=self.seq_len,
                           **dataclasses.asdict(self.model))

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(out_h=self.image_size, out_w=self.image_size,
                             **dataclasses.asdict(self.augment))

    def codebook_path(self) -> Path:
        if self.tokenizer.codebook is not None:
            return Path(self.tokenizer.codebook)
        return Path(self.out_dir) / "codebook.creq"


# JSON key -> dataclass field renames, per section.
_ALIASES = {"train": {"lambda": "lambda_weight"}}
_SECTIONS = {
    "tokenizer": TokenizerSettings,
    "model": ModelSettings,
    "train": TrainConfig,
    "augment": AugmentSettings,
    "probe": ProbeConfig,
    "finetune": FinetuneConfig,
}
_SCALARS = {"seed": int, "manifest": (str, type(None)), "out_dir": str,
            "image_size": int, "split_ratio": float}
# Seeds come from the top-level seed, never from section dictionaries.
_INJECTED = {"seed"}


def _build_section(cls, obj: dict, section: str, seed: int):
    aliases = _ALIASES.get(section, {})
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in obj.items():
        name = aliases.get(key, key)
        if name not in names or name in _INJECTED:
            raise FormatError(f"config: unknown key '{section}.{key}'")
        kwargs[name] = value
    if "seed" in names:
        kwargs["seed"] = seed
    try:
        return cls(**kwargs)
    except (TypeError, ContractError) as exc:
        raise FormatError(f"config: invalid '{section}' section: {exc}") from None


def config_from_dict(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise FormatError("config: top level must be a JSON object")
    unknown = set(obj) - set(_SCALARS) - set(_SECTIONS)
    if unknown:
        raise FormatError(f"config: unknown top-level keys {sorted(unknown)}")
    for key, types in _SCALARS.items():
        if key in obj and not isinstance(obj[key], types):
            raise FormatError(f"config: '{key}' has the wrong type")
    seed = int(obj.get("seed", 0))
    kwargs = {key: obj[key] for key in _SCALARS if key in obj}
    for section, cls in _SECTIONS.items():
        kwargs[section] = _build_section(cls, obj.get(section, {}), section, seed)
    try:
        return RunConfig(**kwargs)
    except ContractError as exc:
        raise FormatError(f"config: {exc}") from None


def load_config(path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc.msg}") from None
    return config_from_dict(obj)


def config_to_dict(cfg: RunConfig) -> dict:
    """Canonical JSON form; loading it back reproduces ``cfg`` exactly."""
    out: dict = {key: getattr(cfg, key) for key in _SCALARS}
    for section, _ in _SECTIONS.items():
        body = dataclasses.asdict(getattr(cfg, section))
        for json_key, field_name in _ALIASES.get(section, {}).items():
            body[json_key] = body.pop(field_name)
        for name in _INJECTED:
            body.pop(name, None)
        out[section] = body
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """Parse one ``--set dotted.key=value`` override; values are JSON when
    they parse, bare strings otherwise.
    """
    if "=" not in text:
        raise FormatError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    if not key:
        raise FormatError(f"--set expects key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(obj: dict, overrides: list[str]) -> dict:
    for text in overrides:
        path, value = parse_override(text)
        cursor = obj
        for part in path[:-1]:
            cursor = cursor.setdefault(part, {})
            if not isinstance(cursor, dict):
                raise FormatError(f"--set {text!r}: '{part}' is not a section")
        cursor[path[-1]] = value
    return obj
