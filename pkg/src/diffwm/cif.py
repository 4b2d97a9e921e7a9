"""Cross information fusion: watermark embedding lookup + cross-attention."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .codec import encode_indices


class EmbeddingTable(nn.Module):
    """Learnable ``2L x D`` table; row ``i + b*L`` embeds bit ``b`` at position ``i``."""

    def __init__(self, L: int, dim: int):
        super().__init__()
        self.L = L
        self.dim = dim
        self.weight = nn.Parameter(torch.randn(2 * L, dim))

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        return lookup(self, w)


def lookup(table: EmbeddingTable, w: torch.Tensor) -> torch.Tensor:
    """Watermark features ``(..., L, D)`` for bits ``(..., L)``."""
    if table.weight.shape[0] != 2 * w.shape[-1]:
        raise ValueError(
            f"embedding table has {table.weight.shape[0]} rows; a {w.shape[-1]}-bit watermark needs "
            f"{2 * w.shape[-1]}"
        )
    return table.weight[encode_indices(w)]


class FusionBlock(nn.Module):
    """Single-head cross-attention: image tokens query watermark features.

    ``W_q`` maps the ``C`` image channels to the attention width, ``W_k`` maps
    the watermark feature width ``D`` to the attention width and ``W_v`` maps
    ``D`` back to ``C`` so the attended values can be added to the tokens.
    Projections carry no bias, so a zero ``W_v`` is an exact passthrough.

    With ``n_positions`` set, a learned per-token offset is added to the
    queries (not to the residual path), so which watermark features a token
    attends to can depend on where the token is, not only on image content.
    """

    def __init__(self, channels: int, embed_dim: int, attn_dim: int | None = None, n_positions: int | None = None):
        super().__init__()
        attn_dim = attn_dim or channels
        self.channels = channels
        self.embed_dim = embed_dim
        self.attn_dim = attn_dim
        self.scale = 1.0 / math.sqrt(attn_dim)
        self.W_q = nn.Linear(channels, attn_dim, bias=False)
        self.W_k = nn.Linear(embed_dim, attn_dim, bias=False)
        self.W_v = nn.Linear(embed_dim, channels, bias=False)
        self.pos = nn.Parameter(torch.randn(n_positions, channels)) if n_positions else None

    def forward(self, x: torch.Tensor, e_w: torch.Tensor, return_attention: bool = False):
        return fuse(self, x, e_w, return_attention=return_attention)


def fuse(block: FusionBlock, x: torch.Tensor, e_w: torch.Tensor, return_attention: bool = False):
    """Fuse watermark features ``e_w`` (``[B,] L, D``) into image features ``x`` (``[B,] C, H, W``)."""
    unbatched = x.ndim == 3
    if unbatched:
        x, e_w = x.unsqueeze(0), e_w.unsqueeze(0)
    if x.ndim != 4 or x.shape[1] != block.channels:
        raise ValueError(f"expected image features (B, {block.channels}, H, W), got {tuple(x.shape)}")
    if e_w.ndim != 3 or e_w.shape[-1] != block.embed_dim or e_w.shape[0] != x.shape[0]:
        raise ValueError(f"expected watermark features (B, L, {block.embed_dim}), got {tuple(e_w.shape)}")

    B, C, H, W = x.shape
    x_f = x.flatten(2).transpose(1, 2)  # B, HW, C
    if block.pos is not None:
        if block.pos.shape[0] != H * W:
            raise ValueError(f"fusion block has {block.pos.shape[0]} query positions, features have {H * W}")
        q = block.W_q(x_f + block.pos)
    else:
        q = block.W_q(x_f)
    k = block.W_k(e_w)
    v = block.W_v(e_w)
    attn = torch.softmax(q @ k.transpose(1, 2) * block.scale, dim=-1)  # B, HW, L
    out = x_f + attn @ v
    if not torch.isfinite(out).all():
        raise FloatingPointError("non-finite activations in cross information fusion")
    out = out.transpose(1, 2).reshape(B, C, H, W)
    if unbatched:
        out, attn = out[0], attn[0]
    return (out, attn) if return_attention else out
