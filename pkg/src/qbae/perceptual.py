"""Multi-scale perceptual features, loss and anomaly scoring.

One frozen reference ViT is adapted to several input patch sizes by
bicubically resampling its patch-embedding kernel and interpolating its
position embeddings, giving a feature map per (tap layer i, patch size p).
The per-location cosine distance between the features of an image and its
reconstruction yields one anomaly map per (i, p).

Training loss (hierarchical form): per layer i, resize the maps of all
patch sizes to the finest grid present, multiply them element-wise, take
the mean, then average over layers. A "global" form is also available:
one cosine distance between whole flattened feature maps per (i, p),
averaged.

Image scores reduce a stack of maps with a spatial step then a cross-map
step (max-then-mean by default; mean-then-max for the chest profile); the
pixel map reduces per pixel after resizing everything to a common target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import FrozenBackbone, interpolate_pos_grid
from .errors import ValidationError

SCORE_MODES = ("max_then_mean", "mean_then_max", "mean_then_mean", "max_then_max")


@dataclass
class PerceptualConfig:
    tap_layers: tuple[int, ...] = (16, 20)
    patch_sizes: tuple[int, ...] = (32, 56)
    score_mode: str = "max_then_mean"
    map_mode: str = "mean"
    loss_form: str = "hierarchical"  # or "global"

    def __post_init__(self):
        self.tap_layers = tuple(self.tap_layers)
        self.patch_sizes = tuple(self.patch_sizes)
        if not self.tap_layers:
            raise ValidationError("need at least one perceptual tap layer")
        if not self.patch_sizes or any(p < 1 for p in self.patch_sizes):
            raise ValidationError("patch sizes must be positive")
        if self.score_mode not in SCORE_MODES:
            raise ValidationError(f"score_mode must be one of {SCORE_MODES}")
        if self.map_mode not in ("mean", "max"):
            raise ValidationError("map_mode must be 'mean' or 'max'")
        if self.loss_form not in ("hierarchical", "global"):
            raise ValidationError("loss_form must be 'hierarchical' or 'global'")


# Supplementary-table defaults.
TRAIN_PERCEPTUAL = PerceptualConfig(tap_layers=(16, 20), patch_sizes=(32, 56))
EVAL_PERCEPTUAL = PerceptualConfig(tap_layers=(12, 16, 20), patch_sizes=(16, 32, 56))
LIVER_EVAL_PERCEPTUAL = PerceptualConfig(tap_layers=(12, 16, 20), patch_sizes=(8, 16))


class MultiScalePerceptual:
    """Frozen reference model evaluated at several input patch sizes.

    Kernel/position resampling happens once per patch size and is cached;
    the transformer blocks themselves are shared, so no weights are copied.
    Forward passes keep the graph w.r.t. the input (weights are frozen but
    the loss needs gradients through the activations).
    """

    def __init__(self, backbone: FrozenBackbone):
        self.backbone = backbone
        self._kernels: dict[tuple[int, torch.dtype], tuple[torch.Tensor, torch.Tensor]] = {}

    @property
    def recorded_checksum(self) -> str:
        return self.backbone.recorded_checksum

    def checksum(self) -> str:
        return self.backbone.checksum()

    def _patch_kernel(self, p: int, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
        key = (p, dtype)
        if key not in self._kernels:
            weight = self.backbone.patch_embed.weight
            bias = self.backbone.patch_embed.bias
            base = weight.shape[-1]
            if p != base:
                weight = F.interpolate(
                    weight, size=(p, p), mode="bicubic", align_corners=False, antialias=p < base
                )
            self._kernels[key] = (weight.to(dtype), bias.to(dtype))
        return self._kernels[key]

    def features(self, x: torch.Tensor, cfg: PerceptualConfig) -> dict[tuple[int, int], torch.Tensor]:
        """[B,3,H,W] -> {(layer, patch): [B, h, w, c]} with h = w = side/p."""
        side = x.shape[-1]
        if x.shape[-2] != side:
            raise ValidationError("perceptual input must be square")
        spec = self.backbone.spec
        bad = [i for i in cfg.tap_layers if i < 0 or i >= spec.depth]
        if bad:
            raise ValidationError(f"tap layers {bad} outside [0, {spec.depth})")
        out: dict[tuple[int, int], torch.Tensor] = {}
        for p in cfg.patch_sizes:
            if side % p:
                raise ValidationError(f"patch size {p} does not divide side {side}")
            weight, bias = self._patch_kernel(p, x.dtype)
            g = side // p
            tokens = F.conv2d(x, weight, bias, stride=p).flatten(2).transpose(1, 2)
            pos = interpolate_pos_grid(self.backbone.pos_embed, spec.pos_grid, g).to(x.dtype)
            tokens = tokens + pos
            if self.backbone.special_tokens is not None:
                specials = self.backbone.special_tokens.to(x.dtype)
                tokens = torch.cat([specials.unsqueeze(0).expand(tokens.shape[0], -1, -1), tokens], dim=1)
            s = spec.special_tokens
            last = max(cfg.tap_layers)
            for i, block in enumerate(self.backbone.blocks):
                tokens = block(tokens)
                if i in cfg.tap_layers:
                    out[(i, p)] = tokens[:, s:, :].reshape(tokens.shape[0], g, g, spec.width)
                if i == last:
                    break
        return out


def layer_anomaly_map(f: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Per-location cosine distance between two [.., h, w, c] feature maps.

    Values lie in [0, 2]. A zero-norm vector at a location makes that cell
    exactly 1 (neutral, avoids NaN poisoning). Identical vectors give
    exactly 0 (forward and backward); anti-parallel vectors give exactly 2.
    """
    f = torch.as_tensor(f)
    g = torch.as_tensor(g)
    if f.shape != g.shape:
        raise ValidationError(f"feature shapes differ: {tuple(f.shape)} vs {tuple(g.shape)}")
    num = (f * g).sum(dim=-1)
    # product before sqrt keeps the self- and anti-parallel cases exact:
    # sqrt(fl(s*s)) == s in IEEE round-to-nearest
    den = torch.sqrt((f * f).sum(dim=-1) * (g * g).sum(dim=-1))
    zero = den == 0
    cos = (num / torch.where(zero, torch.ones_like(den), den)).clamp(-1.0, 1.0)
    dist = 1.0 - cos
    same = (f == g).all(dim=-1) & ~zero
    dist = torch.where(same, torch.zeros_like(dist), dist)
    return torch.where(zero, torch.ones_like(dist), dist)


def resize_map(m: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Bilinear resize of an [..., h, w] anomaly map."""
    if m.shape[-2:] == (target_h, target_w):
        return m
    squeeze = m.dim() == 2
    x = m.unsqueeze(0) if squeeze else m
    x = F.interpolate(x.unsqueeze(1), size=(target_h, target_w), mode="bilinear", align_corners=False)
    x = x.squeeze(1)
    return x.squeeze(0) if squeeze else x


def combine_across_scales(maps: list[torch.Tensor], target_hw: tuple[int, int] | None = None) -> torch.Tensor:
    """Resize one layer's per-patch-size maps to a common grid (the finest
    present unless overridden) and multiply element-wise."""
    if not maps:
        raise ValidationError("no maps to combine")
    maps = [torch.as_tensor(m) for m in maps]
    if target_hw is None:
        target_hw = max((tuple(m.shape[-2:]) for m in maps), key=lambda s: s[0] * s[1])
    out = resize_map(maps[0], *target_hw)
    for m in maps[1:]:
        out = out * resize_map(m, *target_hw)
    return out


def anomaly_map_stack(
    model: MultiScalePerceptual, x: torch.Tensor, x_rec: torch.Tensor, cfg: PerceptualConfig
) -> dict[tuple[int, int], torch.Tensor]:
    """All intermediate maps A[i, p] for a batch: {(i, p): [B, h, w]}."""
    if x.shape != x_rec.shape:
        raise ValidationError(f"image/reconstruction shapes differ: {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    feats = model.features(x, cfg)
    feats_rec = model.features(x_rec, cfg)
    return {key: layer_anomaly_map(feats[key], feats_rec[key]) for key in feats}


def perceptual_loss(
    model: MultiScalePerceptual, x: torch.Tensor, x_rec: torch.Tensor, cfg: PerceptualConfig
) -> torch.Tensor:
    """Scalar reconstruction loss over a batch (mean over batch elements)."""
    if cfg.loss_form == "global":
        feats = model.features(x, cfg)
        feats_rec = model.features(x_rec, cfg)
        terms = []
        for key, f in feats.items():
            # one cosine distance per image over the whole flattened feature map
            dist = layer_anomaly_map(f.flatten(1), feats_rec[key].flatten(1))
            terms.append(dist.mean())
        return torch.stack(terms).mean()

    maps = anomaly_map_stack(model, x, x_rec, cfg)
    per_layer = []
    for i in cfg.tap_layers:
        combined = combine_across_scales([maps[(i, p)] for p in cfg.patch_sizes])
        per_layer.append(combined.mean())
    return torch.stack(per_layer).mean()


def _as_numpy_maps(stack) -> list[np.ndarray]:
    if isinstance(stack, dict):
        stack = [stack[k] for k in sorted(stack)]
    maps = [np.asarray(m.detach().cpu() if isinstance(m, torch.Tensor) else m, dtype=np.float64) for m in stack]
    if not maps:
        raise ValidationError("empty map stack")
    if any(m.ndim != 2 for m in maps):
        raise ValidationError("expected 2D maps")
    return maps


def image_score(stack, mode: str = "max_then_mean") -> float:
    """Reduce a stack of anomaly maps to one scalar. The mode names the
    spatial step then the cross-map step."""
    if mode not in SCORE_MODES:
        raise ValidationError(f"score mode must be one of {SCORE_MODES}")
    maps = _as_numpy_maps(stack)
    spatial, cross = mode.split("_then_")
    reduce_spatial = np.max if spatial == "max" else np.mean
    values = [float(reduce_spatial(m)) for m in maps]
    return float(max(values) if cross == "max" else np.mean(values))


def pixel_map(stack, mode: str = "mean", target_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Per-pixel reduction of a stack of maps after resizing to a common
    resolution (the finest grid present unless a target is given)."""
    if mode not in ("mean", "max"):
        raise ValidationError("pixel map mode must be 'mean' or 'max'")
    maps = _as_numpy_maps(stack)
    if target_hw is None:
        target_hw = max((m.shape for m in maps), key=lambda s: s[0] * s[1])
    resized = [resize_map(torch.from_numpy(m), *target_hw).numpy() for m in maps]
    arr = np.stack(resized, axis=0)
    return arr.mean(axis=0) if mode == "mean" else arr.max(axis=0)


@dataclass
class ScoreResult:
    score: float
    maps: dict = field(default_factory=dict)
    final_map: np.ndarray | None = None


def score_pair(
    model: MultiScalePerceptual,
    x: torch.Tensor,
    x_rec: torch.Tensor,
    cfg: PerceptualConfig,
    with_map: bool = False,
) -> list[ScoreResult]:
    """Per-image scores (and optionally final pixel maps) for a batch."""
    with torch.no_grad():
        stack = anomaly_map_stack(model, x, x_rec, cfg)
    results = []
    side = x.shape[-1]
    for b in range(x.shape[0]):
        maps = {key: stack[key][b].cpu().numpy() for key in stack}
        score = image_score(maps, cfg.score_mode)
        final = pixel_map(maps, cfg.map_mode, target_hw=(side, side)) if with_map else None
        results.append(ScoreResult(score=score, maps=maps, final_map=final))
    return results


def export_map_png(m: np.ndarray, path) -> None:
    """8-bit grayscale export, min-max normalized per image."""
    from PIL import Image

    lo, hi = float(m.min()), float(m.max())
    scaled = np.zeros_like(m, dtype=np.float64) if hi <= lo else (m - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 255.0).astype(np.uint8), mode="L").save(path)


def export_map_raw(m: np.ndarray, path) -> None:
    """Raw float export: two little-endian uint32 dims (height, width),
    then row-major float32 values."""
    m = np.ascontiguousarray(m, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(np.array(m.shape, dtype="<u4").tobytes())
        fh.write(m.astype("<f4").tobytes())


def read_map_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        dims = np.frombuffer(fh.read(8), dtype="<u4")
        data = np.frombuffer(fh.read(), dtype="<f4")
    return data.reshape(int(dims[0]), int(dims[1])).astype(np.float32)
