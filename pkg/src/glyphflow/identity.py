"""Identity embeddings from a small classifier over training identities.

The embedding is the L2-normalized penultimate activation, so cosine
similarity between two embeddings measures identity agreement. The encoder
is trained with plain cross-entropy on rendered identities and then frozen;
the generation stack only ever reads embeddings from it.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import ShapeError


class IdentityEncoder(nn.Module):
    def __init__(self, n_classes: int, embed_dim: int = 64):
        super().__init__()
        self.embed_dim = embed_dim
        self.n_classes = n_classes
        self.conv = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, 128, 3, stride=2, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(2),
        )
        self.embed = nn.Linear(128 * 4, embed_dim)
        self.head = nn.Linear(embed_dim, n_classes)

    def _features(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() == 3:
            img = img[None]
        if img.shape[-1] != 3:
            raise ShapeError("identity encoder expects channel-last RGB images")
        x = self.conv(img.permute(0, 3, 1, 2)).flatten(1)
        return self.embed(x)

    def extract_identity(self, img: torch.Tensor) -> torch.Tensor:
        """Unit-norm identity embedding; (D,) for one image, (B, D) batched."""
        squeeze = img.dim() == 3
        z = self._features(img)
        z = z / z.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return z[0] if squeeze else z

    def logits(self, img: torch.Tensor) -> torch.Tensor:
        return self.head(F.silu(self._features(img)))
