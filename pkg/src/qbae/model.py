"""Assembly of the full reconstruction pipeline.

`TrainableParts` bundles everything the optimizer touches (projections,
query bank, bottleneck, decoder); the frozen encoders and the frozen
perceptual reference live outside it so the frozen contract is enforced
structurally, not just by requires_grad flags.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .encoder import FrozenBackbone, make_projection, project_concat, seeded_init_
from .errors import ValidationError
from .imaging import ImageTensor
from .perceptual import MultiScalePerceptual, PerceptualConfig, ScoreResult, score_pair
from .qformer import QFormer, QueryBank, init_queries, num_queries_for
from .decoder import TokenDecoder


class TrainableParts(nn.Module):
    def __init__(
        self,
        projections: list[nn.Linear],
        queries: QueryBank,
        qformer: QFormer,
        decoder: TokenDecoder,
    ):
        super().__init__()
        if queries.num_queries != decoder.num_tokens:
            raise ValidationError(
                f"query count {queries.num_queries} != decoder tokens {decoder.num_tokens}"
            )
        self.projections = nn.ModuleList(projections)
        self.queries = queries
        self.qformer = qformer
        self.decoder = decoder

    def forward(self, features: list[list[torch.Tensor]]) -> torch.Tensor:
        """Per-encoder tapped features -> reconstructed image batch."""
        context = project_concat(features, list(self.projections))
        batch = context.tokens.shape[0] if context.tokens.dim() == 3 else 1
        z = self.qformer(self.queries.batch(batch), context.tokens)
        return self.decoder.reconstruct_batch(z)


class AnomalyDetector:
    """Frozen encoders + trainable parts + frozen perceptual reference."""

    def __init__(
        self,
        encoders: list[FrozenBackbone],
        parts: TrainableParts,
        perceptual: MultiScalePerceptual,
        norm_mean: float = 0.449,
        norm_std: float = 0.226,
    ):
        if not encoders:
            raise ValidationError("need at least one encoder")
        self.encoders = encoders
        self.parts = parts
        self.perceptual = perceptual
        self.norm_mean = norm_mean
        self.norm_std = norm_std

    def encode(self, x: torch.Tensor) -> list[list[torch.Tensor]]:
        """Tapped features per encoder; no autograd graph (encoders are frozen
        and their inputs are data, not parameters)."""
        with torch.no_grad():
            return [enc.hidden_states(x) for enc in self.encoders]

    def reconstruct_batch(self, x: torch.Tensor) -> torch.Tensor:
        return self.parts(self.encode(x))

    def score_batch(
        self, x: torch.Tensor, cfg: PerceptualConfig, with_map: bool = False
    ) -> list[ScoreResult]:
        with torch.no_grad():
            x_rec = self.reconstruct_batch(x)
        return score_pair(self.perceptual, x, x_rec, cfg, with_map=with_map)

    def score_image(self, img: ImageTensor, cfg: PerceptualConfig, with_map: bool = False) -> ScoreResult:
        if not img.normalized:
            raise ValidationError("score input must be normalized")
        x = torch.from_numpy(np.ascontiguousarray(img.data)).unsqueeze(0)
        return self.score_batch(x, cfg, with_map=with_map)[0]

    def frozen_checksums(self) -> dict[str, str]:
        sums = {f"encoder.{k}": enc.checksum() for k, enc in enumerate(self.encoders)}
        sums["perceptual"] = self.perceptual.checksum()
        return sums


def build_trainable_parts(
    encoder_widths: list[int],
    side: int,
    seed: int,
    proj_dim: int = 768,
    qformer_heads: int = 8,
    qformer_blocks: int = 1,
    qformer_mlp_ratio: float = 4.0,
    decoder_depth: int = 6,
    decoder_heads: int = 12,
    decoder_mlp_ratio: float = 4.0,
    decoder_patch: int = 8,
    channels: int = 3,
) -> TrainableParts:
    """Seeded construction of all trainable modules for a given geometry."""
    m = num_queries_for(side, decoder_patch)
    grid = side // decoder_patch
    projections = [
        make_projection(w, proj_dim, seed=seed * 1000 + k) for k, w in enumerate(encoder_widths)
    ]
    queries = init_queries(m, proj_dim, seed=seed + 1)
    qformer = QFormer(proj_dim, qformer_heads, qformer_mlp_ratio, qformer_blocks)
    seeded_init_(qformer, seed + 2)
    decoder = TokenDecoder(
        dim=proj_dim,
        depth=decoder_depth,
        heads=decoder_heads,
        mlp_ratio=decoder_mlp_ratio,
        patch_size=decoder_patch,
        grid=grid,
        channels=channels,
    )
    seeded_init_(decoder, seed + 3)
    return TrainableParts(projections, queries, qformer, decoder)
