"""Lightweight transformer decoder: latent tokens -> patch pixels -> image.

The decoder adds learned per-position embeddings to the latent sequence,
runs a small pre-norm transformer, and projects each token to
patch_size**2 * channels values. Rearranging those tokens yields the
reconstruction, which lives in normalized space (de-normalize only for
visualization). A depth of 0 is the debug base case: the output is exactly
the linear head applied to the latent, with no positions or final norm.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .encoder import Block
from .errors import ValidationError
from .imaging import ImageTensor


class TokenDecoder(nn.Module):
    def __init__(
        self,
        dim: int = 768,
        depth: int = 6,
        heads: int = 12,
        mlp_ratio: float = 4.0,
        patch_size: int = 8,
        grid: int = 28,
        channels: int = 3,
    ):
        super().__init__()
        if depth < 0 or grid < 1 or patch_size < 1:
            raise ValidationError("invalid decoder geometry")
        self.dim = dim
        self.patch_size = patch_size
        self.grid = grid
        self.channels = channels
        self.pos_embed = nn.Parameter(torch.zeros(grid * grid, dim))
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, patch_size * patch_size * channels)

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def side(self) -> int:
        return self.grid * self.patch_size

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """[B, m, dim] latent -> [B, m, patch**2 * C] pixel tokens."""
        squeeze = z.dim() == 2
        if squeeze:
            z = z.unsqueeze(0)
        if z.shape[1] != self.num_tokens:
            raise ValidationError(f"latent length {z.shape[1]} != grid tokens {self.num_tokens}")
        if z.shape[2] != self.dim:
            raise ValidationError(f"latent width {z.shape[2]} != decoder width {self.dim}")
        if not self.blocks:
            out = self.head(z)
            return out.squeeze(0) if squeeze else out
        x = z + self.pos_embed.to(z.dtype)
        for block in self.blocks:
            x = block(x)
        out = self.head(self.norm(x))
        return out.squeeze(0) if squeeze else out

    forward = decode

    def reconstruct_batch(self, z: torch.Tensor) -> torch.Tensor:
        """[B, m, dim] latent -> [B, C, side, side] image batch (normalized space)."""
        return tokens_to_images(self.decode(z), self.grid, self.grid, self.patch_size, self.channels)


def tokens_to_images(tokens: torch.Tensor, grid_h: int, grid_w: int, patch: int, channels: int) -> torch.Tensor:
    """Differentiable inverse of the imaging patchify layout:
    [B, L, p*p*C] -> [B, C, gh*p, gw*p], tokens row-major, each token in
    (row, col, channel) order."""
    b, length, dim = tokens.shape
    if length != grid_h * grid_w or dim != patch * patch * channels:
        raise ValidationError(
            f"token shape {(length, dim)} inconsistent with grid {grid_h}x{grid_w}, patch {patch}"
        )
    x = tokens.reshape(b, grid_h, grid_w, patch, patch, channels)
    x = x.permute(0, 5, 1, 3, 2, 4)
    return x.reshape(b, channels, grid_h * patch, grid_w * patch)


def images_to_tokens(images: torch.Tensor, patch: int) -> torch.Tensor:
    """Differentiable patchify matching the imaging layout:
    [B, C, H, W] -> [B, L, p*p*C]."""
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise ValidationError(f"patch {patch} does not divide {h}x{w}")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    x = x.permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b, gh * gw, patch * patch * c)


def reconstruct(decoder: TokenDecoder, z: torch.Tensor) -> ImageTensor:
    """Decode one latent [m, dim] to an ImageTensor in normalized space."""
    batch = decoder.reconstruct_batch(z.unsqueeze(0) if z.dim() == 2 else z)
    data = batch[0].detach().cpu().numpy().astype(np.float32)
    return ImageTensor(data, colorspace="gray" if decoder.channels == 1 else "rgb", normalized=True)
