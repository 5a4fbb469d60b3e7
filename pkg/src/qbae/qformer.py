"""Query-token bottleneck.

A fixed bank of m learnable query tokens passes through self-attention,
cross-attention over the (variable-length) context tokens, and an MLP.
Each sub-layer is pre-norm with a residual connection. The output length
is always m, no matter how long the context is, which is what makes the
bottleneck decouple the encoder from the decoder.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .encoder import Mlp
from .errors import ValidationError


class QueryBank(nn.Module):
    """Holder for the m x D learnable query tokens."""

    def __init__(self, num_queries: int, dim: int):
        super().__init__()
        if num_queries < 1 or dim < 1:
            raise ValidationError("query count and width must be positive")
        self.queries = nn.Parameter(torch.zeros(num_queries, dim))

    @property
    def num_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def dim(self) -> int:
        return self.queries.shape[1]

    def batch(self, batch_size: int) -> torch.Tensor:
        return self.queries.unsqueeze(0).expand(batch_size, -1, -1)


def init_queries(num_queries: int, dim: int, seed: int = 0) -> QueryBank:
    bank = QueryBank(num_queries, dim)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        bank.queries.normal_(0.0, 0.02, generator=g)
    return bank


def num_queries_for(side: int, decoder_patch: int) -> int:
    """Query count that reconstructs a side x side image at the given patch."""
    if side % decoder_patch:
        raise ValidationError(f"decoder patch {decoder_patch} does not divide side {side}")
    return (side // decoder_patch) ** 2


class CrossAttention(nn.Module):
    """Multi-head attention of queries over external key/value tokens.

    Attention weights are a softmax over the context, so each query's row is
    a probability distribution; `forward(..., return_attn=True)` exposes it.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"heads ({heads}) must divide width ({dim})")
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, queries: torch.Tensor, context: torch.Tensor, return_attn: bool = False):
        b, m, d = queries.shape
        n = context.shape[1]
        q = self.q(queries).reshape(b, m, self.heads, self.head_dim).transpose(1, 2)
        kv = self.kv(context).reshape(b, n, 2, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)  # [b, h, m, n]
        out = (attn @ v).transpose(1, 2).reshape(b, m, d)
        out = self.proj(out)
        if return_attn:
            return out, attn
        return out


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.inner = CrossAttention(dim, heads)

    def forward(self, x):
        return self.inner(x, x)


class QFormerBlock(nn.Module):
    """One bottleneck block: self-attention on the queries, cross-attention
    over the context, then an MLP; pre-norm, residual around each."""

    def __init__(self, dim: int = 768, heads: int = 8, mlp_ratio: float = 4.0):
        super().__init__()
        self.dim = dim
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = CrossAttention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, queries: torch.Tensor, context: torch.Tensor, return_attn: bool = False):
        squeeze = queries.dim() == 2
        if squeeze:
            queries = queries.unsqueeze(0)
        if context.dim() == 2:
            context = context.unsqueeze(0).expand(queries.shape[0], -1, -1)
        if queries.shape[-1] != self.dim or context.shape[-1] != self.dim:
            raise ValidationError(
                f"width mismatch: queries {queries.shape[-1]}, context {context.shape[-1]}, block {self.dim}"
            )
        if context.shape[-2] < 1:
            raise ValidationError("context must hold at least one token")

        x = queries + self.self_attn(self.norm1(queries))
        cross_out, attn = self.cross_attn(self.norm2(x), context, return_attn=True)
        x = x + cross_out
        z = x + self.mlp(self.norm3(x))
        if squeeze:
            z, attn = z.squeeze(0), attn.squeeze(0)
        if return_attn:
            return z, attn
        return z


class QFormer(nn.Module):
    """Stack of bottleneck blocks (one by default)."""

    def __init__(self, dim: int = 768, heads: int = 8, mlp_ratio: float = 4.0, num_blocks: int = 1):
        super().__init__()
        if num_blocks < 1:
            raise ValidationError("need at least one block")
        self.blocks = nn.ModuleList(QFormerBlock(dim, heads, mlp_ratio) for _ in range(num_blocks))

    def forward(self, queries: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        x = queries
        for block in self.blocks:
            x = block(x, context)
        return x
