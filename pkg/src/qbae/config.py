"""Run configuration: defaults, file parsing and serialization.

Config files are plain text, one `section.key = value` per line, where the
value is JSON (`#` starts a comment). Unknown keys are a hard error so a
typo cannot silently fall back to a default. An empty file yields the full
default configuration from the training/evaluation tables: DINOv2-L/14
encoder spec, 784 queries, decoder patch 8, one-cycle Adam at 8e-5, the
0.449/0.226 normalization, and the multi-scale perceptual settings.

`serialize_config` followed by `parse_config` reproduces the exact config.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError

ARCHIVE_DIR_ENV = "QBAE_ARCHIVE_DIR"


@dataclass
class ImageSection:
    side: int = 224
    norm_mean: float = 0.449
    norm_std: float = 0.226


@dataclass
class EncoderEntry:
    name: str = "dinov2_vitl14_reg"
    depth: int = 24
    width: int = 1024
    heads: int = 16
    patch_size: int = 14
    special_tokens: int = 5
    pos_grid: int = 16
    tap_layers: list = field(default_factory=lambda: [20, 22])
    proj_in: int = 1024
    frozen: bool = True
    archive: str | None = None
    toy_seed: int | None = None
    toy_pos_scale: float = 1.0


@dataclass
class ProjectionSection:
    out_dim: int = 768


@dataclass
class QFormerSection:
    dim: int = 768
    heads: int = 8
    mlp_ratio: float = 4.0
    blocks: int = 1
    num_queries: int | None = None  # derived from (side / decoder patch)**2 when null


@dataclass
class DecoderSection:
    dim: int = 768
    depth: int = 6
    heads: int = 12
    mlp_ratio: float = 4.0
    patch_size: int = 8
    grid: int | None = None  # derived from side / patch_size when null


@dataclass
class PerceptualModelSection:
    name: str = "mae_vitl16"
    depth: int = 24
    width: int = 1024
    heads: int = 16
    patch_size: int = 16
    special_tokens: int = 1
    pos_grid: int = 14
    archive: str | None = None
    toy_seed: int | None = None
    toy_pos_scale: float = 0.02


@dataclass
class LossSection:
    type: str = "perceptual"  # perceptual | mae | mae+perceptual
    layers: list = field(default_factory=lambda: [16, 20])
    patch_sizes: list = field(default_factory=lambda: [32, 56])
    form: str = "hierarchical"
    distance: str = "cosine"


@dataclass
class MetricSection:
    layers: list = field(default_factory=lambda: [12, 16, 20])
    patch_sizes: list = field(default_factory=lambda: [16, 32, 56])
    score_spatial: str = "max"
    score_cross: str = "mean"
    map_cross: str = "mean"
    distance: str = "cosine"


@dataclass
class OptimizerSection:
    name: str = "adam"
    max_lr: float = 8e-5
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class ScheduleSection:
    name: str = "onecycle"
    warmup_frac: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4


@dataclass
class TrainSection:
    epochs: int = 300
    batch_size: int = 64
    seeds: list = field(default_factory=lambda: [42, 7, 13, 65, 91])
    augment: bool = True
    device: str = "cpu"


@dataclass
class AugmentSection:
    crop_scale: list = field(default_factory=lambda: [0.90, 1.00])
    crop_aspect: list = field(default_factory=lambda: [0.80, 1.20])
    rotation_deg: float = 10.0
    vflip_prob: float = 0.5
    jitter: float = 0.1


@dataclass
class EvalSection:
    batch_size: int = 64
    profile: str = "custom"
    augment: str = "none"


@dataclass
class RunConfig:
    image: ImageSection = field(default_factory=ImageSection)
    encoders: list = field(default_factory=lambda: [EncoderEntry()])
    projection: ProjectionSection = field(default_factory=ProjectionSection)
    qformer: QFormerSection = field(default_factory=QFormerSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    perceptual_model: PerceptualModelSection = field(default_factory=PerceptualModelSection)
    loss: LossSection = field(default_factory=LossSection)
    perceptual: MetricSection = field(default_factory=MetricSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainSection = field(default_factory=TrainSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 42
    out: str = "runs"
    archive_dir: str | None = None


_SECTIONS = {
    "image": ImageSection,
    "projection": ProjectionSection,
    "qformer": QFormerSection,
    "decoder": DecoderSection,
    "perceptual_model": PerceptualModelSection,
    "loss": LossSection,
    "perceptual": MetricSection,
    "optimizer": OptimizerSection,
    "schedule": ScheduleSection,
    "train": TrainSection,
    "augment": AugmentSection,
    "eval": EvalSection,
}
_SCALARS = ("seed", "out", "archive_dir")


def _coerce(key: str, value, default):
    """Type-check a parsed JSON value against the default's type."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ValidationError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValidationError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ValidationError(f"{key}: expected a list, got {value!r}")
        return value
    return value


def default_config() -> RunConfig:
    return RunConfig()


def apply_key(cfg: RunConfig, key: str, value) -> None:
    if key == "encoders":
        if not isinstance(value, list) or not value:
            raise ValidationError("encoders: expected a non-empty list of objects")
        entries = []
        for item in value:
            if not isinstance(item, dict):
                raise ValidationError("encoders: entries must be objects")
            entry = EncoderEntry()
            valid = {f.name for f in dataclasses.fields(EncoderEntry)}
            for k, v in item.items():
                if k not in valid:
                    raise ValidationError(f"encoders: unknown field {k!r}")
                setattr(entry, k, _coerce(f"encoders.{k}", v, getattr(EncoderEntry(), k)))
            entries.append(entry)
        cfg.encoders = entries
        return
    if key in _SCALARS:
        setattr(cfg, key, _coerce(key, value, getattr(RunConfig(), key)))
        return
    if "." in key:
        section, _, attr = key.partition(".")
        if section in _SECTIONS:
            target = getattr(cfg, section)
            valid = {f.name for f in dataclasses.fields(target)}
            if attr in valid:
                setattr(target, attr, _coerce(key, value, getattr(_SECTIONS[section](), attr)))
                return
    raise ValidationError(f"unknown config key {key!r}")


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or default_config()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value_text = line.partition("=")
        key = key.strip()
        try:
            value = json.loads(value_text.strip())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {lineno}: invalid JSON value for {key!r}: {exc}") from exc
        apply_key(cfg, key, value)
    validate_config(cfg)
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    lines.append(f"encoders = {json.dumps([dataclasses.asdict(e) for e in cfg.encoders])}")
    for section in sorted(_SECTIONS):
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {json.dumps(getattr(obj, f.name))}")
    for key in _SCALARS:
        lines.append(f"{key} = {json.dumps(getattr(cfg, key))}")
    return "\n".join(lines) + "\n"


def validate_config(cfg: RunConfig) -> None:
    if cfg.optimizer.max_lr <= 0:
        raise ValidationError(f"optimizer.max_lr must be positive, got {cfg.optimizer.max_lr}")
    if cfg.optimizer.name != "adam":
        raise ValidationError(f"unsupported optimizer {cfg.optimizer.name!r}")
    if cfg.schedule.name != "onecycle":
        raise ValidationError(f"unsupported scheduler {cfg.schedule.name!r}")
    if cfg.train.epochs < 1:
        raise ValidationError("train.epochs must be >= 1")
    if cfg.loss.type not in ("perceptual", "mae", "mae+perceptual"):
        raise ValidationError(f"unknown loss.type {cfg.loss.type!r}")
    if cfg.loss.distance != "cosine" or cfg.perceptual.distance != "cosine":
        raise ValidationError("only the cosine distance metric is supported")
    if cfg.perceptual.score_spatial not in ("max", "mean") or cfg.perceptual.score_cross not in ("max", "mean"):
        raise ValidationError("score aggregation steps must be 'max' or 'mean'")
    if cfg.perceptual.map_cross not in ("max", "mean"):
        raise ValidationError("perceptual.map_cross must be 'max' or 'mean'")
    if cfg.eval.augment != "none":
        raise ValidationError("evaluation augmentation must stay 'none'")
    if not cfg.encoders:
        raise ValidationError("need at least one encoder")
    for k, entry in enumerate(cfg.encoders):
        if not entry.frozen:
            raise ValidationError(f"encoders[{k}]: encoders are frozen by contract")
        if entry.proj_in != entry.width:
            raise ValidationError(
                f"encoders[{k}]: proj_in ({entry.proj_in}) must equal encoder width ({entry.width})"
            )
    if cfg.image.side % cfg.decoder.patch_size:
        raise ValidationError(
            f"decoder.patch_size {cfg.decoder.patch_size} does not divide image.side {cfg.image.side}"
        )
    derived_m = (cfg.image.side // cfg.decoder.patch_size) ** 2
    if cfg.qformer.num_queries is not None and cfg.qformer.num_queries != derived_m:
        raise ValidationError(
            f"qformer.num_queries ({cfg.qformer.num_queries}) must equal (side/patch)^2 = {derived_m}"
        )
    if cfg.decoder.grid is not None and cfg.decoder.grid != cfg.image.side // cfg.decoder.patch_size:
        raise ValidationError("decoder.grid must equal side / patch_size")
    if cfg.train.device not in ("cpu", "cuda"):
        raise ValidationError(f"unknown device {cfg.train.device!r}")


def resolve_archive(name_or_path: str | None, archive_dir: str | None):
    """Resolve an archive reference against the config/env archive directory."""
    if name_or_path is None:
        return None
    p = Path(name_or_path)
    if p.exists():
        return p
    base = archive_dir or os.environ.get(ARCHIVE_DIR_ENV)
    if base is not None and (Path(base) / name_or_path).exists():
        return Path(base) / name_or_path
    raise FileNotFoundError(f"archive not found: {name_or_path}")
