"""Builders turning a RunConfig into runtime objects."""

from __future__ import annotations

from .config import EncoderEntry, PerceptualModelSection, RunConfig, resolve_archive
from .encoder import BackboneSpec, FrozenBackbone, load_backbone, make_toy_backbone
from .errors import ValidationError
from .imaging import AugmentConfig
from .model import AnomalyDetector, TrainableParts, build_trainable_parts
from .perceptual import MultiScalePerceptual, PerceptualConfig
from .training import TrainConfig


def backbone_spec(entry: EncoderEntry | PerceptualModelSection) -> BackboneSpec:
    taps = tuple(entry.tap_layers) if isinstance(entry, EncoderEntry) else ()
    return BackboneSpec(
        depth=entry.depth,
        width=entry.width,
        heads=entry.heads,
        patch_size=entry.patch_size,
        special_tokens=entry.special_tokens,
        tap_layers=taps,
        pos_grid=entry.pos_grid,
    )


def build_backbone(entry, archive_dir: str | None, fallback_seed: int) -> FrozenBackbone:
    spec = backbone_spec(entry)
    if entry.archive is not None:
        return load_backbone(resolve_archive(entry.archive, archive_dir), spec)
    seed = entry.toy_seed if entry.toy_seed is not None else fallback_seed
    return make_toy_backbone(seed, spec, pos_scale=entry.toy_pos_scale)


def loss_perceptual_config(cfg: RunConfig) -> PerceptualConfig:
    return PerceptualConfig(
        tap_layers=tuple(cfg.loss.layers),
        patch_sizes=tuple(cfg.loss.patch_sizes),
        loss_form=cfg.loss.form,
    )


def metric_perceptual_config(cfg: RunConfig) -> PerceptualConfig:
    return PerceptualConfig(
        tap_layers=tuple(cfg.perceptual.layers),
        patch_sizes=tuple(cfg.perceptual.patch_sizes),
        score_mode=f"{cfg.perceptual.score_spatial}_then_{cfg.perceptual.score_cross}",
        map_mode=cfg.perceptual.map_cross,
    )


def augment_config(cfg: RunConfig) -> AugmentConfig:
    return AugmentConfig(
        side=cfg.image.side,
        crop_scale=tuple(cfg.augment.crop_scale),
        crop_aspect=tuple(cfg.augment.crop_aspect),
        rotation_deg=cfg.augment.rotation_deg,
        vflip_prob=cfg.augment.vflip_prob,
        jitter=cfg.augment.jitter,
        norm_mean=cfg.image.norm_mean,
        norm_std=cfg.image.norm_std,
    )


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.train.epochs,
        batch_size=cfg.train.batch_size,
        max_lr=cfg.optimizer.max_lr,
        betas=tuple(cfg.optimizer.betas),
        eps=cfg.optimizer.eps,
        weight_decay=cfg.optimizer.weight_decay,
        warmup_frac=cfg.schedule.warmup_frac,
        div_factor=cfg.schedule.div_factor,
        final_div_factor=cfg.schedule.final_div_factor,
        loss=cfg.loss.type,
        augment=cfg.train.augment,
        side=cfg.image.side,
        seeds=tuple(cfg.train.seeds),
        perceptual=loss_perceptual_config(cfg),
        augment_cfg=augment_config(cfg),
    )


def build_parts(cfg: RunConfig, seed: int) -> TrainableParts:
    for p in set(cfg.loss.patch_sizes) | set(cfg.perceptual.patch_sizes):
        if cfg.image.side % p:
            raise ValidationError(f"perceptual patch size {p} does not divide side {cfg.image.side}")
    return build_trainable_parts(
        encoder_widths=[e.width for e in cfg.encoders],
        side=cfg.image.side,
        seed=seed,
        proj_dim=cfg.projection.out_dim,
        qformer_heads=cfg.qformer.heads,
        qformer_blocks=cfg.qformer.blocks,
        qformer_mlp_ratio=cfg.qformer.mlp_ratio,
        decoder_depth=cfg.decoder.depth,
        decoder_heads=cfg.decoder.heads,
        decoder_mlp_ratio=cfg.decoder.mlp_ratio,
        decoder_patch=cfg.decoder.patch_size,
    )


def build_detector(cfg: RunConfig, seed: int | None = None) -> AnomalyDetector:
    seed = cfg.seed if seed is None else seed
    encoders = [
        build_backbone(entry, cfg.archive_dir, fallback_seed=seed * 101 + k)
        for k, entry in enumerate(cfg.encoders)
    ]
    perceptual_backbone = build_backbone(cfg.perceptual_model, cfg.archive_dir, fallback_seed=seed * 101 + 97)
    parts = build_parts(cfg, seed)
    return AnomalyDetector(
        encoders=encoders,
        parts=parts,
        perceptual=MultiScalePerceptual(perceptual_backbone),
        norm_mean=cfg.image.norm_mean,
        norm_std=cfg.image.norm_std,
    )


def toy_run_config(side: int = 64, seed: int = 42) -> RunConfig:
    """Desk-scale configuration: toy backbones, small trainable parts.

    Geometry follows the synthetic benchmark: side 64, encoder depth 4 /
    width 64 / patch 8, decoder patch 8 (64 queries), perceptual patch
    sizes that divide 64.
    """
    cfg = RunConfig()
    cfg.image.side = side
    cfg.encoders = [
        EncoderEntry(
            name="toy",
            depth=4,
            width=64,
            heads=4,
            patch_size=8,
            special_tokens=1,
            pos_grid=side // 8,
            tap_layers=[1, 3],
            proj_in=64,
            toy_seed=7,
        )
    ]
    cfg.projection.out_dim = 64
    cfg.qformer.dim = 64
    cfg.qformer.heads = 4
    cfg.decoder.dim = 64
    cfg.decoder.depth = 2
    cfg.decoder.heads = 4
    cfg.decoder.patch_size = 8
    cfg.perceptual_model = PerceptualModelSection(
        name="toy", depth=4, width=64, heads=4, patch_size=8, special_tokens=1,
        pos_grid=side // 8, toy_seed=11,
    )
    cfg.loss.layers = [1, 3]
    cfg.loss.patch_sizes = [8, 16]
    cfg.perceptual.layers = [1, 2, 3]
    cfg.perceptual.patch_sizes = [8, 16]
    cfg.train.epochs = 50
    cfg.train.batch_size = 16
    cfg.train.augment = False
    cfg.train.seeds = [42, 7, 13]
    cfg.optimizer.max_lr = 2e-3
    cfg.seed = seed
    return cfg
