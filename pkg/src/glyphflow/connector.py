"""Instruction adaptation for a frozen generator.

A small multimodal stub embeds (symbol sequence, reference image) pairs.
The connector then maps that instruction embedding (query) together with the
image's semantic features (key) to refined semantic features (value) that
drop into the text-stream slot the generator already understands, trained
purely by MSE against the semantic features of the ground-truth image. The
generator itself is never touched.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import (
    MMDiTBlock,
    ShapeError,
    position_encoding_1d,
)


@dataclass
class InstructionEmbedding:
    tokens: torch.Tensor  # (L, D) or (B, L, D)
    pooled: torch.Tensor  # (D,) or (B, D); mean of tokens by definition


def _to_nchw(img: torch.Tensor) -> torch.Tensor:
    if img.dim() == 3:
        img = img[None]
    return img.permute(0, 3, 1, 2)


class SelfAttnLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x):
        b, t, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        q, k, v = (y.view(b, t, self.heads, hd).transpose(1, 2) for y in (q, k, v))
        attn = F.scaled_dot_product_attention(q, k, v)
        x = x + self.out(attn.transpose(1, 2).reshape(b, t, d))
        return x + self.mlp(self.norm2(x))


class StubInstructionEncoder(nn.Module):
    """Deterministic multimodal embedder: symbol table + image patches,
    mixed by two self-attention layers; pooled output is the token mean."""

    def __init__(self, vocab_size: int, feature_dim: int, image_size: int, heads: int = 4):
        super().__init__()
        if image_size % 4 != 0:
            raise ShapeError("image_size must be divisible by 4")
        patch = image_size // 4
        self.table = nn.Embedding(vocab_size, feature_dim)
        self.patches = nn.Conv2d(3, feature_dim, kernel_size=patch, stride=patch)
        self.layers = nn.ModuleList(SelfAttnLayer(feature_dim, heads) for _ in range(2))

    def forward(self, text_ids: torch.Tensor, ref_img: torch.Tensor) -> InstructionEmbedding:
        squeeze = text_ids.dim() == 1
        ids = text_ids[None] if squeeze else text_ids
        if ids.shape[-1] < 1:
            raise ShapeError("instruction needs at least one symbol")
        img_tok = self.patches(_to_nchw(ref_img)).flatten(2).transpose(1, 2)
        if img_tok.shape[0] == 1 and ids.shape[0] > 1:
            img_tok = img_tok.expand(ids.shape[0], -1, -1)
        x = torch.cat([self.table(ids), img_tok], dim=1)
        x = x + position_encoding_1d(torch.arange(x.shape[1]), x.shape[-1]).to(x.dtype)
        for layer in self.layers:
            x = layer(x)
        pooled = x.mean(dim=1)
        if squeeze:
            return InstructionEmbedding(x[0], pooled[0])
        return InstructionEmbedding(x, pooled)


class SemanticEncoder(nn.Module):
    """Image to M x D semantic tokens for the generator's text stream."""

    def __init__(self, feature_dim: int, m_tokens: int = 16):
        super().__init__()
        grid = int(round(m_tokens ** 0.5))
        if grid * grid != m_tokens:
            raise ShapeError("m_tokens must be a perfect square")
        self.m_tokens = m_tokens
        self.conv = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, feature_dim, 3, stride=2, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(grid),
        )
        self.mlp = nn.Sequential(
            nn.Linear(feature_dim, feature_dim), nn.SiLU(),
            nn.Linear(feature_dim, feature_dim),
        )

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        squeeze = img.dim() == 3
        feats = self.conv(_to_nchw(img)).flatten(2).transpose(1, 2)
        out = self.mlp(feats)
        return out[0] if squeeze else out

    def pooled(self, img: torch.Tensor) -> torch.Tensor:
        return self.forward(img).mean(dim=-2)


class CrossAttnLayer(nn.Module):
    """Residual cross-attention with a zero-initialized output projection,
    so a freshly built (or zeroed) layer passes its trunk through verbatim."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, trunk, context):
        b, t, d = trunk.shape
        hd = d // self.heads
        q = self.q(self.norm(trunk)).view(b, t, self.heads, hd).transpose(1, 2)
        k, v = self.kv(context).chunk(2, dim=-1)
        k = k.view(b, -1, self.heads, hd).transpose(1, 2)
        v = v.view(b, -1, self.heads, hd).transpose(1, 2)
        attn = F.scaled_dot_product_attention(q, k, v)
        return trunk + self.out(attn.transpose(1, 2).reshape(b, t, d))


class InstructionConnector(nn.Module):
    """Dual-stream adapter: d joint-attention blocks mix the mapped query
    with the key stream, then l cross-attention layers modulate a trunk that
    starts at the original key, yielding the refined value."""

    def __init__(self, d: int, l: int, feature_dim: int, heads: int = 4):
        super().__init__()
        if d < 1 or l < 1:
            raise ShapeError("connector needs d >= 1 and l >= 1")
        self.feature_dim = feature_dim
        self.query_map = nn.Sequential(
            nn.Linear(feature_dim, feature_dim), nn.SiLU(),
            nn.Linear(feature_dim, feature_dim),
        )
        self.cond_proj = nn.Linear(feature_dim, feature_dim)
        self.blocks = nn.ModuleList(MMDiTBlock(feature_dim, heads) for _ in range(d))
        self.cross = nn.ModuleList(CrossAttnLayer(feature_dim, heads) for _ in range(l))

    def forward(self, query: InstructionEmbedding, key: torch.Tensor) -> torch.Tensor:
        squeeze = key.dim() == 2
        k_in = key[None] if squeeze else key
        q_tok = query.tokens[None] if query.tokens.dim() == 2 else query.tokens
        pooled = query.pooled[None] if query.pooled.dim() == 1 else query.pooled
        if q_tok.shape[-1] != self.feature_dim or k_in.shape[-1] != self.feature_dim:
            raise ShapeError(
                f"connector width {self.feature_dim}, got query {q_tok.shape[-1]} "
                f"and key {k_in.shape[-1]}"
            )
        q = self.query_map(q_tok)
        q = q + position_encoding_1d(torch.arange(q.shape[1]), q.shape[-1]).to(q.dtype)
        if q.shape[0] == 1 and k_in.shape[0] > 1:
            q = q.expand(k_in.shape[0], -1, -1)
        cond = self.cond_proj(pooled)
        k_ctx, q_ctx = k_in, q
        for block in self.blocks:
            k_ctx, q_ctx = block(k_ctx, q_ctx, cond)
        context = torch.cat([q_ctx, k_ctx], dim=1)
        value = k_in
        for layer in self.cross:
            value = layer(value, context)
        return value[0] if squeeze else value


def connector_loss(value: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all feature entries."""
    if value.shape != target.shape:
        raise ShapeError(f"shape mismatch {tuple(value.shape)} vs {tuple(target.shape)}")
    return ((value - target) ** 2).mean()


def compose_text_stream(value: torch.Tensor, text_tokens: torch.Tensor) -> torch.Tensor:
    """Concatenate along the token axis, text first."""
    if value.shape[-1] != text_tokens.shape[-1]:
        raise ShapeError(
            f"width mismatch: value {value.shape[-1]} vs text {text_tokens.shape[-1]}"
        )
    return torch.cat([text_tokens, value], dim=-2)
