"""Optimization of the trainable parts against frozen references.

One run = (config, corpus, seed) -> checkpoint archive plus a JSONL log of
{step, lr, loss, wall_ms}. Everything random (weight init, shuffling,
augmentation) derives from the run seed, so the logged (step, lr, loss)
sequence is reproducible bit for bit. Encoder and perceptual checksums are
recorded before training and re-verified after.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .archive import load_archive, save_archive
from .data import Corpus
from .errors import TrainingDiverged, ValidationError
from .imaging import AugmentConfig, ImageTensor, augment, load_image, normalize, resize, to_rgb
from .model import AnomalyDetector, TrainableParts
from .perceptual import PerceptualConfig, perceptual_loss

LOSS_MODES = ("perceptual", "mae", "mae+perceptual")


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    max_lr: float = 8e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_frac: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    loss: str = "perceptual"
    augment: bool = True
    side: int = 224
    seeds: tuple[int, ...] = (42, 7, 13, 65, 91)
    perceptual: PerceptualConfig = field(default_factory=PerceptualConfig)
    augment_cfg: AugmentConfig | None = None

    def __post_init__(self):
        if self.max_lr <= 0:
            raise ValidationError(f"max_lr must be positive, got {self.max_lr}")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.loss not in LOSS_MODES:
            raise ValidationError(f"loss must be one of {LOSS_MODES}")


def onecycle_lr(
    step: int,
    total_steps: int,
    max_lr: float,
    warmup_frac: float = 0.3,
    div_factor: float = 25.0,
    final_div_factor: float = 1e4,
) -> float:
    """Cosine one-cycle schedule.

    Rises from max_lr/div_factor to max_lr over the first warmup fraction of
    steps, peaks exactly at the phase boundary, then anneals to
    max_lr/final_div_factor at the last step. Continuous at the boundary.
    """
    if total_steps < 1:
        raise ValidationError("total_steps must be >= 1")
    if step < 0 or step >= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps})")
    if total_steps == 1:
        return max_lr
    peak = max(1, min(total_steps - 1, int(round(warmup_frac * total_steps))))
    initial = max_lr / div_factor
    final = max_lr / final_div_factor
    if step <= peak:
        t = step / peak
        return initial + (max_lr - initial) * (1.0 - np.cos(np.pi * t)) / 2.0
    t = (step - peak) / (total_steps - 1 - peak)
    return final + (max_lr - final) * (1.0 + np.cos(np.pi * t)) / 2.0


def _load_train_image(path, side: int) -> ImageTensor:
    return to_rgb(resize(load_image(path), side, side))


def prepare_batch(
    images: list[ImageTensor],
    cfg: TrainConfig,
    seed: int,
    epoch: int,
    indices: list[int],
) -> torch.Tensor:
    """Augment (or just normalize) and stack a batch. Per-image RNG derives
    from (seed, epoch, dataset index) so batch composition does not affect
    the pixels an image receives."""
    acfg = cfg.augment_cfg or AugmentConfig(side=cfg.side)
    out = []
    for idx, img in zip(indices, images):
        if cfg.augment:
            rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, idx]))
            proc = augment(img, acfg, rng)
        else:
            proc = normalize(resize(img, cfg.side, cfg.side), acfg.norm_mean, acfg.norm_std)
        out.append(torch.from_numpy(np.ascontiguousarray(proc.data)))
    return torch.stack(out, dim=0)


def compute_loss(
    detector: AnomalyDetector, x: torch.Tensor, x_rec: torch.Tensor, mode: str, pcfg: PerceptualConfig
) -> torch.Tensor:
    if mode == "mae":
        return (x_rec - x).abs().mean()
    if mode == "perceptual":
        return perceptual_loss(detector.perceptual, x, x_rec, pcfg)
    return (x_rec - x).abs().mean() + perceptual_loss(detector.perceptual, x, x_rec, pcfg)


@dataclass
class TrainResult:
    records: list[dict]
    final_loss: float
    checkpoint_path: Path | None
    frozen_before: dict[str, str]
    frozen_after: dict[str, str]


def train(
    cfg: TrainConfig,
    corpus: Corpus,
    detector: AnomalyDetector,
    seed: int,
    out_dir=None,
    log_name: str = "train_log.jsonl",
    config_echo: str | None = None,
) -> TrainResult:
    if not corpus.train:
        raise ValidationError("empty training corpus")
    frozen_before = detector.frozen_checksums()

    images = [_load_train_image(p, cfg.side) for p in corpus.train]
    params = [p for p in detector.parts.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(
        params, lr=cfg.max_lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay
    )

    n = len(images)
    batches_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * batches_per_epoch
    records: list[dict] = []
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / log_name, "w")

    step = 0
    detector.parts.train()
    try:
        for epoch in range(cfg.epochs):
            perm = np.random.default_rng(np.random.SeedSequence([seed, 1 + epoch])).permutation(n)
            for b in range(batches_per_epoch):
                idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size].tolist()
                batch = prepare_batch([images[i] for i in idx], cfg, seed, epoch, idx)
                lr = onecycle_lr(
                    step, total_steps, cfg.max_lr, cfg.warmup_frac, cfg.div_factor, cfg.final_div_factor
                )
                for group in optimizer.param_groups:
                    group["lr"] = lr
                t0 = time.perf_counter()
                optimizer.zero_grad(set_to_none=True)
                x_rec = detector.parts(detector.encode(batch))
                loss = compute_loss(detector, batch, x_rec, cfg.loss, cfg.perceptual)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(step)
                loss.backward()
                optimizer.step()
                record = {
                    "step": step,
                    "lr": float(lr),
                    "loss": float(loss.detach()),
                    "wall_ms": (time.perf_counter() - t0) * 1000.0,
                }
                records.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                step += 1
    finally:
        if log_fh:
            log_fh.close()
    detector.parts.eval()

    frozen_after = detector.frozen_checksums()
    if frozen_after != frozen_before:
        raise RuntimeError("frozen weights changed during training")

    checkpoint_path = None
    if out_dir is not None:
        if config_echo is None:
            import dataclasses

            config_echo = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
        checkpoint_path = Path(out_dir) / "checkpoint.qfa"
        save_checkpoint(
            checkpoint_path,
            detector.parts,
            metadata={
                "config": config_echo,
                "seed": str(seed),
                "final_loss": repr(records[-1]["loss"]) if records else "nan",
                "frozen_checksums": json.dumps(frozen_before, sort_keys=True),
            },
        )
    return TrainResult(
        records=records,
        final_loss=records[-1]["loss"] if records else float("nan"),
        checkpoint_path=checkpoint_path,
        frozen_before=frozen_before,
        frozen_after=frozen_after,
    )


def save_checkpoint(path, parts: TrainableParts, metadata: dict[str, str] | None = None) -> None:
    """Trainable tensors under their module prefixes plus a config echo."""
    tensors: dict[str, np.ndarray] = {}
    for k, proj in enumerate(parts.projections):
        tensors[f"proj.{k}.weight"] = proj.weight.detach().numpy().astype(np.float32)
        tensors[f"proj.{k}.bias"] = proj.bias.detach().numpy().astype(np.float32)
    tensors["queries"] = parts.queries.queries.detach().numpy().astype(np.float32)
    for name, p in parts.qformer.state_dict().items():
        tensors[f"qformer.{name}"] = p.detach().numpy().astype(np.float32)
    for name, p in parts.decoder.state_dict().items():
        tensors[f"decoder.{name}"] = p.detach().numpy().astype(np.float32)
    save_archive(path, tensors, metadata=metadata)


def load_checkpoint(path, parts: TrainableParts) -> dict[str, str]:
    """Load trainable tensors into an already-built parts module; returns the
    embedded metadata."""
    tensors, metadata = load_archive(path)
    with torch.no_grad():
        for k, proj in enumerate(parts.projections):
            proj.weight.copy_(torch.from_numpy(tensors[f"proj.{k}.weight"]))
            proj.bias.copy_(torch.from_numpy(tensors[f"proj.{k}.bias"]))
        parts.queries.queries.copy_(torch.from_numpy(tensors["queries"]))
        qf_state = {
            name[len("qformer.") :]: torch.from_numpy(arr)
            for name, arr in tensors.items()
            if name.startswith("qformer.")
        }
        parts.qformer.load_state_dict(qf_state)
        dec_state = {
            name[len("decoder.") :]: torch.from_numpy(arr)
            for name, arr in tensors.items()
            if name.startswith("decoder.")
        }
        parts.decoder.load_state_dict(dec_state)
    return metadata
