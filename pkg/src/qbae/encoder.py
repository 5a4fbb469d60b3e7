"""Frozen ViT-style feature extractors.

A backbone is a pre-norm ViT with learned position embeddings over the
spatial grid and optional special tokens (class + register) prepended as
full learned input embeddings. Hidden states are tapped at the outputs of
selected blocks, special tokens are stripped, and a per-encoder affine
projection maps every tap to a common width before concatenation.

Backbones stay frozen: parameters never receive gradients and a SHA-256
checksum of the state is recorded at construction so the frozen contract
can be verified bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import fnv1a64_hex, load_archive, state_checksum
from .errors import ManifestError, ValidationError
from .imaging import ImageTensor


@dataclass(frozen=True)
class BackboneSpec:
    depth: int
    width: int
    heads: int
    patch_size: int
    special_tokens: int = 0
    tap_layers: tuple[int, ...] = ()
    pos_grid: int = 16  # pretraining grid side for the position embeddings
    mlp_ratio: float = 4.0
    channels: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.patch_size < 1:
            raise ValidationError("depth, width and patch_size must be positive")
        if self.width % self.heads:
            raise ValidationError(f"heads ({self.heads}) must divide width ({self.width})")
        if any(t < 0 or t >= self.depth for t in self.tap_layers):
            raise ValidationError(f"tap layers {self.tap_layers} outside [0, {self.depth})")


# Supplementary-table presets; tap layers follow the 2nd/4th-to-last rule.
DINOV2_VITL14_REG = BackboneSpec(
    depth=24, width=1024, heads=16, patch_size=14, special_tokens=5, tap_layers=(20, 22), pos_grid=16
)
DINO_VITB8 = BackboneSpec(
    depth=12, width=768, heads=12, patch_size=8, special_tokens=1, tap_layers=(8, 10), pos_grid=28
)
MAE_VITL16 = BackboneSpec(depth=24, width=1024, heads=16, patch_size=16, special_tokens=1, pos_grid=14)

ENCODER_PRESETS = {
    "dinov2_vitl14_reg": DINOV2_VITL14_REG,
    "dino_vitb8": DINO_VITB8,
    "mae_vitl16": MAE_VITL16,
}


def required_layout(spec: BackboneSpec) -> dict[str, tuple[int, ...]]:
    """Tensor roles and shapes an archive must supply for this spec."""
    w, hidden = spec.width, int(spec.width * spec.mlp_ratio)
    layout: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (w, spec.channels, spec.patch_size, spec.patch_size),
        "patch_embed.bias": (w,),
        "pos_embed": (spec.pos_grid * spec.pos_grid, w),
    }
    if spec.special_tokens:
        layout["special_tokens"] = (spec.special_tokens, w)
    for i in range(spec.depth):
        layout.update(
            {
                f"block.{i}.norm1.weight": (w,),
                f"block.{i}.norm1.bias": (w,),
                f"block.{i}.attn.qkv.weight": (3 * w, w),
                f"block.{i}.attn.qkv.bias": (3 * w,),
                f"block.{i}.attn.proj.weight": (w, w),
                f"block.{i}.attn.proj.bias": (w,),
                f"block.{i}.norm2.weight": (w,),
                f"block.{i}.norm2.bias": (w,),
                f"block.{i}.mlp.fc1.weight": (hidden, w),
                f"block.{i}.mlp.fc1.bias": (hidden,),
                f"block.{i}.mlp.fc2.weight": (w, hidden),
                f"block.{i}.mlp.fc2.bias": (w,),
            }
        )
    return layout


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


def interpolate_pos_grid(pos: torch.Tensor, src_grid: int, dst_grid: int) -> torch.Tensor:
    """Bicubic 2D interpolation of [G*G, D] position embeddings to a new grid."""
    if src_grid == dst_grid:
        return pos
    d = pos.shape[1]
    grid = pos.reshape(1, src_grid, src_grid, d).permute(0, 3, 1, 2)
    grid = F.interpolate(grid, size=(dst_grid, dst_grid), mode="bicubic", align_corners=False)
    return grid.permute(0, 2, 3, 1).reshape(dst_grid * dst_grid, d)


class FrozenBackbone(nn.Module):
    """ViT whose parameters are fixed after construction.

    Forward passes are deterministic; parameters carry requires_grad=False
    so nothing here ever enters an optimizer. Gradients still flow through
    activations, which the perceptual loss relies on.
    """

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.patch_embed = nn.Conv2d(
            spec.channels, spec.width, kernel_size=spec.patch_size, stride=spec.patch_size
        )
        self.pos_embed = nn.Parameter(torch.zeros(spec.pos_grid * spec.pos_grid, spec.width))
        if spec.special_tokens:
            self.special_tokens = nn.Parameter(torch.zeros(spec.special_tokens, spec.width))
        else:
            self.special_tokens = None
        self.blocks = nn.ModuleList(
            Block(spec.width, spec.heads, spec.mlp_ratio) for _ in range(spec.depth)
        )
        self._checksum: str | None = None

    def freeze(self) -> "FrozenBackbone":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self._checksum = self.checksum()
        return self

    @property
    def frozen(self) -> bool:
        return all(not p.requires_grad for p in self.parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in self.state_dict().items()}

    def checksum(self) -> str:
        return state_checksum(self.state_arrays())

    @property
    def recorded_checksum(self) -> str:
        if self._checksum is None:
            self._checksum = self.checksum()
        return self._checksum

    def embed(self, x: torch.Tensor, patch_weight=None, patch_bias=None) -> torch.Tensor:
        """Patch-embed a [B,3,H,W] batch, add interpolated positions and
        prepend special tokens. An alternative patch kernel may be supplied
        (used by the multi-scale perceptual adapter)."""
        weight = self.patch_embed.weight if patch_weight is None else patch_weight
        bias = self.patch_embed.bias if patch_bias is None else patch_bias
        p = weight.shape[-1]
        if x.shape[-2] % p or x.shape[-1] % p:
            raise ValidationError(f"input {tuple(x.shape[-2:])} not divisible by patch {p}")
        tokens = F.conv2d(x, weight, bias, stride=p)  # [B, D, gh, gw]
        b, d, gh, gw = tokens.shape
        if gh != gw:
            raise ValidationError("only square token grids are supported")
        tokens = tokens.flatten(2).transpose(1, 2)  # [B, L, D]
        pos = interpolate_pos_grid(self.pos_embed, self.spec.pos_grid, gh).to(tokens.dtype)
        tokens = tokens + pos
        if self.special_tokens is not None:
            specials = self.special_tokens.to(tokens.dtype).unsqueeze(0).expand(b, -1, -1)
            tokens = torch.cat([specials, tokens], dim=1)
        return tokens

    def hidden_states(self, x: torch.Tensor, tap_layers=None) -> list[torch.Tensor]:
        """Run the trunk and return tapped block outputs with special tokens
        stripped: one [B, L_spatial, D] tensor per tap, in tap order."""
        taps = tuple(tap_layers) if tap_layers is not None else self.spec.tap_layers
        if not taps:
            raise ValidationError("no tap layers requested")
        if any(t < 0 or t >= self.spec.depth for t in taps):
            raise ValidationError(f"tap layers {taps} outside [0, {self.spec.depth})")
        tokens = self.embed(x)
        s = self.spec.special_tokens
        out: dict[int, torch.Tensor] = {}
        last = max(taps)
        for i, block in enumerate(self.blocks):
            tokens = block(tokens)
            if i in taps:
                out[i] = tokens[:, s:, :]
            if i == last:
                break
        return [out[t] for t in taps]

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self.hidden_states(x)


def extract_hidden_states(backbone: FrozenBackbone, img: ImageTensor) -> list[torch.Tensor]:
    """Tap hidden states for one normalized image; returns [L, D] tensors."""
    if not img.normalized:
        raise ValidationError("backbone input must be normalized")
    if img.height % backbone.spec.patch_size or img.width % backbone.spec.patch_size:
        raise ValidationError(
            f"resolution {img.height}x{img.width} not divisible by patch {backbone.spec.patch_size}"
        )
    x = torch.from_numpy(np.ascontiguousarray(img.data)).unsqueeze(0)
    with torch.no_grad():
        feats = backbone.hidden_states(x)
    return [f.squeeze(0) for f in feats]


@dataclass
class ContextTokens:
    """Concatenated projected features: encoder order, then tap order, then
    spatial order. `source_layout` records (encoder, tap_layer, offset, length)."""

    tokens: torch.Tensor  # [B, L, D_proj] or [L, D_proj]
    source_layout: list[tuple[int, int, int, int]] = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]


def project_concat(
    features: list[list[torch.Tensor]], projections: list[nn.Linear]
) -> ContextTokens:
    """Apply each encoder's projection to its tapped features and concatenate.

    `features[k]` holds encoder k's taps ([B, L, D_k] or [L, D_k]); all
    projections must share the same output width.
    """
    if len(features) != len(projections):
        raise ValidationError(f"{len(features)} feature sets but {len(projections)} projections")
    out_dims = {p.out_features for p in projections}
    if len(out_dims) != 1:
        raise ValidationError(f"projections disagree on output width: {sorted(out_dims)}")
    segments = []
    layout = []
    offset = 0
    for k, (taps, proj) in enumerate(zip(features, projections)):
        for t, feat in enumerate(taps):
            if feat.shape[-1] != proj.in_features:
                raise ValidationError(
                    f"encoder {k} tap {t}: width {feat.shape[-1]} != projection input {proj.in_features}"
                )
            projected = proj(feat)
            segments.append(projected)
            layout.append((k, t, offset, projected.shape[-2]))
            offset += projected.shape[-2]
    return ContextTokens(tokens=torch.cat(segments, dim=-2), source_layout=layout)


def make_projection(in_dim: int, out_dim: int = 768, seed: int = 0) -> nn.Linear:
    """Affine projection with seeded scaled-uniform (fan-in) initialization."""
    proj = nn.Linear(in_dim, out_dim)
    g = torch.Generator().manual_seed(seed)
    bound = 1.0 / (in_dim**0.5)
    with torch.no_grad():
        proj.weight.uniform_(-bound, bound, generator=g)
        proj.bias.uniform_(-bound, bound, generator=g)
    return proj


def seeded_init_(module: nn.Module, seed: int) -> None:
    """Deterministically re-initialize all parameters of a module from an
    explicit generator, independent of global RNG state. Embedding-like
    tensors get normal(0, 0.02); linear/conv weights and biases get
    scaled-uniform fan-in; layer norms get ones/zeros."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            base = name.rsplit(".", 1)[-1]
            if any(k in name for k in ("pos_embed", "special_tokens", "queries")):
                p.normal_(0.0, 0.02, generator=g)
            elif "norm" in name:
                p.fill_(1.0 if base == "weight" else 0.0)
            elif base == "weight" and p.dim() > 1:
                fan_in = int(np.prod(p.shape[1:]))
                bound = 1.0 / (fan_in**0.5)
                p.uniform_(-bound, bound, generator=g)
            else:
                p.uniform_(-0.02, 0.02, generator=g)


def make_toy_backbone(seed: int, spec: BackboneSpec, pos_scale: float = 1.0) -> FrozenBackbone:
    """Small deterministic backbone for desk-scale runs and tests.

    pos_scale sets the positional-embedding magnitude relative to the
    unit-scale features. A frozen random trunk never learns positions, so
    encoder toys need a strong positional signal (~1.0) for downstream
    cross-attention to route by location; reference models used for
    feature comparison keep it small so content dominates the features.
    """
    backbone = FrozenBackbone(spec)
    seeded_init_(backbone, seed)
    with torch.no_grad():
        backbone.pos_embed.mul_(pos_scale / 0.02)
    return backbone.freeze()


def load_backbone(
    archive_path, spec: BackboneSpec, manifest_path=None, verify_checksums: bool = False
) -> FrozenBackbone:
    """Build a frozen backbone from a tensor archive.

    A sidecar manifest (<archive>.manifest.json by default) maps roles to
    archive tensor names; without one, archive names are taken as roles.
    Missing or mis-shaped tensors raise ManifestError naming the tensor.
    """
    archive_path = Path(archive_path)
    tensors, _ = load_archive(archive_path)

    roles: dict[str, str] = {}
    manifest = None
    if manifest_path is None:
        candidate = archive_path.with_suffix(".manifest.json")
        manifest_path = candidate if candidate.exists() else None
    if manifest_path is not None:
        manifest = json.loads(Path(manifest_path).read_text())
        roles = {role: entry["tensor"] for role, entry in manifest["roles"].items()}

    layout = required_layout(spec)
    state: dict[str, torch.Tensor] = {}
    for role, shape in layout.items():
        name = roles.get(role, role)
        if name not in tensors:
            raise ManifestError(f"archive missing tensor '{name}' (role '{role}')")
        arr = tensors[name]
        if tuple(arr.shape) != shape:
            raise ManifestError(
                f"tensor '{name}' (role '{role}') has shape {tuple(arr.shape)}, expected {shape}"
            )
        if verify_checksums and manifest is not None:
            recorded = manifest["roles"][role].get("fnv1a64")
            if recorded is not None and recorded != fnv1a64_hex(arr):
                raise ManifestError(f"tensor '{name}' (role '{role}') failed its checksum")
        state[role] = torch.from_numpy(arr.astype(np.float32))

    backbone = FrozenBackbone(spec)
    with torch.no_grad():
        backbone.patch_embed.weight.copy_(state["patch_embed.weight"])
        backbone.patch_embed.bias.copy_(state["patch_embed.bias"])
        backbone.pos_embed.copy_(state["pos_embed"])
        if spec.special_tokens:
            backbone.special_tokens.copy_(state["special_tokens"])
        for i, block in enumerate(backbone.blocks):
            pre = f"block.{i}."
            block.norm1.weight.copy_(state[pre + "norm1.weight"])
            block.norm1.bias.copy_(state[pre + "norm1.bias"])
            block.attn.qkv.weight.copy_(state[pre + "attn.qkv.weight"])
            block.attn.qkv.bias.copy_(state[pre + "attn.qkv.bias"])
            block.attn.proj.weight.copy_(state[pre + "attn.proj.weight"])
            block.attn.proj.bias.copy_(state[pre + "attn.proj.bias"])
            block.norm2.weight.copy_(state[pre + "norm2.weight"])
            block.norm2.bias.copy_(state[pre + "norm2.bias"])
            block.mlp.fc1.weight.copy_(state[pre + "mlp.fc1.weight"])
            block.mlp.fc1.bias.copy_(state[pre + "mlp.fc1.bias"])
            block.mlp.fc2.weight.copy_(state[pre + "mlp.fc2.weight"])
            block.mlp.fc2.bias.copy_(state[pre + "mlp.fc2.bias"])
    return backbone.freeze()
