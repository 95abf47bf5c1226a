"""Pixel-level conditioning with zero-initialized injection.

A stride-free conv stack (dense path) reads clean reference latents and a
strided conv stack (sparse path) reads raw pose maps, bypassing the latent
codec. Both feed 1x1 projections that start at exactly zero, so the injected
canvas equals the plain canvas at initialization. A small branch of copied
backbone blocks processes the injected stream and returns one residual per
branch block, each through its own zero-initialized fusion projection; the
backbone consumes residual (b mod N) after block b. The whole apparatus is
therefore a bit-exact no-op until training moves the zero weights.
"""

from __future__ import annotations

import copy

import torch
from torch import nn

from .backbone import (
    Backbone,
    ShapeError,
    position_encoding_1d,
    position_encoding_2d,
)


def _to_nchw(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        x = x[None]
    return x.permute(0, 3, 1, 2)


def _from_nchw(x: torch.Tensor, squeeze: bool) -> torch.Tensor:
    x = x.permute(0, 2, 3, 1)
    return x[0] if squeeze else x


class DenseEncoder(nn.Module):
    """Six stride-1 convolutions with SiLU between layers; shape-preserving."""

    def __init__(self, channels: int, hidden: int = 56):
        super().__init__()
        widths = [channels, hidden, hidden, hidden, hidden, hidden, channels]
        layers = []
        for i in range(6):
            layers.append(nn.Conv2d(widths[i], widths[i + 1], 3, stride=1, padding=1))
            if i < 5:
                layers.append(nn.SiLU())
        self.net = nn.Sequential(*layers)
        self.out_channels = channels

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        squeeze = z.dim() == 3
        return _from_nchw(self.net(_to_nchw(z)), squeeze)


class SparseEncoder(nn.Module):
    """Strided convolutions downsampling a raw map by the codec patch size."""

    def __init__(self, total_stride: int = 8, out_channels: int = 64):
        super().__init__()
        stride = total_stride
        if stride < 2 or stride & (stride - 1):
            raise ShapeError("sparse encoder stride must be a power of two >= 2")
        widths = [3]
        strides = []
        while stride > 1:
            strides += [2, 1]
            stride //= 2
        base = [32, 32, 48, 48, 64, 64]
        for i in range(len(strides)):
            widths.append(base[i] if i < len(base) - 1 else out_channels)
        widths[-1] = out_channels
        layers = []
        for i, s in enumerate(strides):
            layers.append(nn.Conv2d(widths[i], widths[i + 1], 3, stride=s, padding=1))
            if i < len(strides) - 1:
                layers.append(nn.SiLU())
        self.net = nn.Sequential(*layers)
        self.total_stride = total_stride
        self.out_channels = out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        h, w = x.shape[-3], x.shape[-2]
        if h % self.total_stride or w % self.total_stride:
            raise ShapeError(
                f"map size {h}x{w} not divisible by stride {self.total_stride}"
            )
        return _from_nchw(self.net(_to_nchw(x)), squeeze)


def _zero_conv(cin: int, cout: int) -> nn.Conv2d:
    conv = nn.Conv2d(cin, cout, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ControlAdapters(nn.Module):
    """Dense/sparse feature extractors plus their zero-init projections and
    the zero-init global visual token projection."""

    def __init__(self, latent_channels: int, text_dim: int, feature_dim: int,
                 patch: int = 8, dense_hidden: int = 56):
        super().__init__()
        self.dve = DenseEncoder(latent_channels, dense_hidden)
        self.sve = SparseEncoder(patch)
        self.c0 = _zero_conv(self.dve.out_channels, latent_channels)
        self.c1 = _zero_conv(self.sve.out_channels, latent_channels)
        self.visual_proj = nn.Linear(feature_dim, text_dim)
        nn.init.zeros_(self.visual_proj.weight)
        nn.init.zeros_(self.visual_proj.bias)

    def global_visual_token(self, pooled_semantic: torch.Tensor) -> torch.Tensor:
        """One extra text token from pooled semantic features; zero at init."""
        return self.visual_proj(pooled_semantic)

    def inject(self, canvas, dense, sparse, alpha: float, beta: float,
               ref_width: int):
        """canvas + alpha*C0(dense) on the reference region and
        beta*C1(sparse) on the target region; absent streams add zero."""
        if alpha < 0 or beta < 0:
            raise ValueError("injection strengths must be non-negative")
        squeeze = canvas.dim() == 3
        x = canvas[None] if squeeze else canvas
        out = x
        if dense is not None:
            d = dense[None] if dense.dim() == 3 else dense
            if d.shape[1] != x.shape[1] or d.shape[2] > x.shape[2]:
                raise ShapeError(
                    f"dense features {tuple(d.shape[1:3])} exceed canvas "
                    f"{tuple(x.shape[1:3])}"
                )
            proj = _from_nchw(self.c0(_to_nchw(d)), False)
            pad = torch.zeros(
                x.shape[0], x.shape[1], x.shape[2] - d.shape[2], x.shape[3],
                dtype=x.dtype,
            )
            out = out + alpha * torch.cat([proj, pad], dim=2)
        if sparse is not None:
            s = sparse[None] if sparse.dim() == 3 else sparse
            tgt_w = x.shape[2] - ref_width
            if s.shape[1] != x.shape[1] or s.shape[2] != tgt_w:
                raise ShapeError(
                    f"sparse features {tuple(s.shape[1:3])} do not match the "
                    f"target region {x.shape[1]}x{tgt_w}"
                )
            proj = _from_nchw(self.c1(_to_nchw(s)), False)
            pad = torch.zeros(
                x.shape[0], x.shape[1], ref_width, x.shape[3], dtype=x.dtype
            )
            out = out + beta * torch.cat([pad, proj], dim=2)
        return out[0] if squeeze else out


class ControlBranch(nn.Module):
    """N blocks copied from the head of a backbone, run over the injected
    canvas; emits per-block residuals through zero-init fusion projections."""

    def __init__(self, backbone: Backbone, n_blocks: int):
        super().__init__()
        cfg = backbone.config
        if n_blocks < 1 or n_blocks > cfg.depth:
            raise ShapeError(
                f"control branch needs 1 <= N <= depth, got N={n_blocks} "
                f"depth={cfg.depth}"
            )
        self.n_blocks = n_blocks
        self.depth = cfg.depth
        self.model_dim = cfg.model_dim
        self.max_positions = cfg.max_positions
        self.img_in = copy.deepcopy(backbone.img_in)
        self.txt_in = copy.deepcopy(backbone.txt_in)
        self.t_embedder = copy.deepcopy(backbone.t_embedder)
        self.pooled_proj = copy.deepcopy(backbone.pooled_proj)
        self.blocks = nn.ModuleList(
            copy.deepcopy(backbone.blocks[i]) for i in range(n_blocks)
        )
        self.fusion = nn.ModuleList()
        for _ in range(n_blocks):
            proj = nn.Linear(cfg.model_dim, cfg.model_dim)
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)
            self.fusion.append(proj)

    def forward(self, injected_canvas, positions, text_tokens, pooled, tau):
        squeeze = injected_canvas.dim() == 3
        x = injected_canvas[None] if squeeze else injected_canvas
        bsz, h, w, c = x.shape
        positions.validate(h * w, self.max_positions)
        txt = text_tokens[None] if text_tokens.dim() == 2 else text_tokens
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

        cond = self.t_embedder(tau) + self.pooled_proj(pl)
        pe = position_encoding_2d(positions.row_ids, positions.col_ids, self.model_dim)
        img = self.img_in(x.reshape(bsz, h * w, c)) + pe.to(x.dtype)
        t = self.txt_in(txt) + position_encoding_1d(
            torch.arange(txt.shape[1]), self.model_dim
        ).to(x.dtype)

        residuals = []
        for block, fuse in zip(self.blocks, self.fusion):
            img, t = block(img, t, cond)
            residuals.append(fuse(img))
        return residuals

    def schedule(self) -> list:
        """Backbone block index -> branch residual index (cyclic)."""
        return [b % self.n_blocks for b in range(self.depth)]


def branch_is_silent(adapters: ControlAdapters, branch: ControlBranch) -> bool:
    """True while every injection and fusion projection is exactly zero."""
    mods = [adapters.c0, adapters.c1, adapters.visual_proj] + list(branch.fusion)
    return all(
        not p.detach().abs().sum().item() for m in mods for p in m.parameters()
    )
