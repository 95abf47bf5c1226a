"""Flow-matching diffusion transformer over latent canvases.

Latent patches and text tokens run as two parallel streams that attend
jointly in every block; a pooled conditioning vector plus the timestep
embedding drive each block's scale/shift/gate modulation. Positions are
parameter-free sinusoids over (row, col) index pairs, so reference and
generated regions share one index grid with the generated origin offset
diagonally past the reference block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


class ShapeError(ValueError):
    pass


def timestep_features(tau, dim: int) -> torch.Tensor:
    """Sinusoidal features of a scalar time in [0,1]; (dim,) or (B, dim)."""
    if dim % 2 != 0:
        raise ShapeError("timestep feature dim must be even")
    if not torch.is_tensor(tau):
        tau = torch.tensor(float(tau))
    if ((tau < 0) | (tau > 1)).any():
        raise ValueError(f"timestep outside [0,1]: {tau}")
    half = dim // 2
    freqs = torch.exp(
        torch.linspace(0.0, math.log(1000.0), half, dtype=tau.dtype)
    )
    ang = tau[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def position_encoding_1d(pos: torch.Tensor, dim: int) -> torch.Tensor:
    if dim % 2 != 0:
        raise ShapeError("position encoding dim must be even")
    half = dim // 2
    inv = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    )
    ang = pos.double()[..., None] * inv
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def position_encoding_2d(row_ids, col_ids, dim: int) -> torch.Tensor:
    """Per-axis sinusoids, summed; parameter-free and exactly reproducible.

    The sum is symmetric under swapping (row, col), so mirror pairs inside a
    square block share an encoding; token content disambiguates them, and
    cross-segment indices never mirror because the generated origin is offset
    diagonally past the references.
    """
    return position_encoding_1d(row_ids, dim) + position_encoding_1d(col_ids, dim)


@dataclass
class PositionGrid:
    row_ids: torch.Tensor
    col_ids: torch.Tensor

    def __len__(self):
        return len(self.row_ids)

    def validate(self, n_tokens: int, max_positions) -> None:
        if len(self.row_ids) != n_tokens or len(self.col_ids) != n_tokens:
            raise ShapeError(
                f"positions cover {len(self.row_ids)} tokens, canvas has {n_tokens}"
            )
        if (self.row_ids < 0).any() or (self.col_ids < 0).any():
            raise ShapeError("negative position index")
        if int(self.row_ids.max()) >= max_positions[0] or (
            int(self.col_ids.max()) >= max_positions[1]
        ):
            raise ShapeError(
                f"position index exceeds max_positions {tuple(max_positions)}; "
                "raise max_positions or shrink the layout"
            )


def assign_positions(height: int, ref_widths, target_width=None,
                     origin=(0, 0), max_positions=(4096, 4096)) -> PositionGrid:
    """Index grid for a [refs | target] canvas, token order row-major.

    Reference tokens keep their pixel indices; the generated region's
    upper-left index is (height, sum of reference widths), diagonally past
    the reference block's lower-right corner, so the two index sets are
    disjoint for every layout.
    """
    ref_w = int(sum(ref_widths))
    tgt_w = int(target_width or 0)
    width = ref_w + tgt_w
    if height <= 0 or width <= 0:
        raise ShapeError("empty layout")
    r0, c0 = origin
    jj = torch.arange(width).repeat(height)
    ii = torch.arange(height).repeat_interleave(width)
    rows = ii + r0
    if ref_w and tgt_w:
        rows = rows + torch.where(jj >= ref_w, height, 0)
    cols = jj + c0
    grid = PositionGrid(rows.long(), cols.long())
    grid.validate(height * width, max_positions)
    return grid


@dataclass
class BackboneConfig:
    depth: int = 8
    model_dim: int = 256
    heads: int = 8
    text_dim: int = 128
    latent_channels: int = 192
    max_positions: tuple = (4096, 4096)

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ShapeError("model_dim must be divisible by heads")
        if self.depth < 2:
            raise ShapeError("depth must be at least 2")


def _attention(q, k, v, heads: int):
    b, t, d = q.shape
    hd = d // heads
    q, k, v = (x.view(b, -1, heads, hd).transpose(1, 2) for x in (q, k, v))
    out = F.scaled_dot_product_attention(q, k, v)
    return out.transpose(1, 2).reshape(b, -1, d)


class MMDiTBlock(nn.Module):
    """Parallel-stream transformer block with joint attention.

    Both streams contribute queries, keys, and values to one attention op;
    each keeps its own projections, MLP, and conditioning-driven modulation.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.mod_a = nn.Linear(dim, 6 * dim)
        self.mod_b = nn.Linear(dim, 6 * dim)
        self.norm_a1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.norm_b1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.norm_a2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.norm_b2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.qkv_a = nn.Linear(dim, 3 * dim)
        self.qkv_b = nn.Linear(dim, 3 * dim)
        self.out_a = nn.Linear(dim, dim)
        self.out_b = nn.Linear(dim, dim)
        self.mlp_a = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.mlp_b = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, a, b, cond):
        c = F.silu(cond)[:, None, :]
        sa1, ga1, ma1, sa2, ga2, ma2 = self.mod_a(c).chunk(6, dim=-1)
        sb1, gb1, mb1, sb2, gb2, mb2 = self.mod_b(c).chunk(6, dim=-1)

        ha = self.norm_a1(a) * (1 + ga1) + sa1
        hb = self.norm_b1(b) * (1 + gb1) + sb1
        qa, ka, va = self.qkv_a(ha).chunk(3, dim=-1)
        qb, kb, vb = self.qkv_b(hb).chunk(3, dim=-1)
        q = torch.cat([qa, qb], dim=1)
        k = torch.cat([ka, kb], dim=1)
        v = torch.cat([va, vb], dim=1)
        attn = _attention(q, k, v, self.heads)
        attn_a, attn_b = attn[:, : a.shape[1]], attn[:, a.shape[1] :]
        a = a + ma1 * self.out_a(attn_a)
        b = b + mb1 * self.out_b(attn_b)

        a = a + ma2 * self.mlp_a(self.norm_a2(a) * (1 + ga2) + sa2)
        b = b + mb2 * self.mlp_b(self.norm_b2(b) * (1 + gb2) + sb2)
        return a, b


class TimestepEmbedder(nn.Module):
    """Sinusoid table through a 2-layer nonlinearity."""

    def __init__(self, dim: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.net = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, tau) -> torch.Tensor:
        feats = timestep_features(tau, self.freq_dim)
        return self.net(feats.to(next(self.net.parameters()).dtype))


def embed_timestep(tau, dim: int) -> torch.Tensor:
    """Deterministic timestep embedding at a given width (fresh seeded net)."""
    with torch.random.fork_rng():
        torch.manual_seed(0)
        net = TimestepEmbedder(dim)
    with torch.no_grad():
        return net(tau)


class CaptionEmbedder(nn.Module):
    """Learned symbol table feeding the text stream."""

    def __init__(self, vocab_size: int, text_dim: int):
        super().__init__()
        self.table = nn.Embedding(vocab_size, text_dim)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.table(ids)


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        dim = config.model_dim
        self.img_in = nn.Linear(config.latent_channels, dim)
        self.txt_in = nn.Linear(config.text_dim, dim)
        self.t_embedder = TimestepEmbedder(dim)
        self.pooled_proj = nn.Linear(config.text_dim, dim)
        self.blocks = nn.ModuleList(
            MMDiTBlock(dim, config.heads) for _ in range(config.depth)
        )
        self.final_norm = nn.LayerNorm(dim, elementwise_affine=False)
        self.final_mod = nn.Linear(dim, 2 * dim)
        self.final_out = nn.Linear(dim, config.latent_channels)

    def forward(self, canvas_values, positions: PositionGrid, text_tokens,
                pooled, tau, block_residuals=None):
        """Velocity prediction with the input canvas shape.

        Accepts (h, w, c) or (B, h, w, c) canvases; text (L, D) or (B, L, D);
        tau scalar or per-item; block_residuals, when given, is one tensor
        per block added to the image stream after that block.
        """
        squeeze = canvas_values.dim() == 3
        x = canvas_values[None] if squeeze else canvas_values
        if x.dim() != 4:
            raise ShapeError(f"canvas must be rank 3 or 4, got {canvas_values.dim()}")
        bsz, h, w, c = x.shape
        if c != self.config.latent_channels:
            raise ShapeError(
                f"canvas has {c} channels, backbone expects {self.config.latent_channels}"
            )
        positions.validate(h * w, self.config.max_positions)

        txt = text_tokens[None] if text_tokens.dim() == 2 else text_tokens
        if txt.shape[-1] != self.config.text_dim:
            raise ShapeError(
                f"text width {txt.shape[-1]} != text_dim {self.config.text_dim}"
            )
        if txt.shape[0] == 1 and bsz > 1:
            txt = txt.expand(bsz, -1, -1)
        pl = pooled[None] if pooled.dim() == 1 else pooled
        if pl.shape[0] == 1 and bsz > 1:
            pl = pl.expand(bsz, -1)

        if not torch.is_tensor(tau):
            tau = torch.tensor(float(tau), dtype=x.dtype)
        tau = tau.to(x.dtype)
        if tau.dim() == 0:
            tau = tau.repeat(bsz)

        dim = self.config.model_dim
        cond = self.t_embedder(tau) + self.pooled_proj(pl)

        pe_img = position_encoding_2d(positions.row_ids, positions.col_ids, dim)
        img = self.img_in(x.reshape(bsz, h * w, c)) + pe_img.to(x.dtype)
        pe_txt = position_encoding_1d(torch.arange(txt.shape[1]), dim)
        t = self.txt_in(txt) + pe_txt.to(x.dtype)

        for i, block in enumerate(self.blocks):
            img, t = block(img, t, cond)
            if block_residuals is not None and block_residuals[i] is not None:
                img = img + block_residuals[i]

        shift, scale = self.final_mod(F.silu(cond))[:, None, :].chunk(2, dim=-1)
        out = self.final_out(self.final_norm(img) * (1 + scale) + shift)
        out = out.reshape(bsz, h, w, c)
        return out[0] if squeeze else out
