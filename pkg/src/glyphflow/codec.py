"""Exact image<->latent codec and latent canvas layout.

The codec replaces a learned autoencoder with an invertible space-to-depth
rearrangement plus midpoint centering ([0,1] -> [-1,1]). Pixel values live on
the dyadic grid k/256, which makes encode/decode bit-exact round trips in
float32 (the k/255 convention does not survive the affine map exactly).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image as PILImage

REFERENCE = "reference"
TARGET = "target"


class CanvasError(ValueError):
    """Canvas metadata is inconsistent with its values."""


def load_image(path) -> np.ndarray:
    """Load an 8-bit RGB PNG as a float32 (H, W, 3) array on the k/256 grid."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 256.0


def save_image(img: np.ndarray, path) -> None:
    """Quantize a float [0,1] image back to 8-bit RGB and write a PNG."""
    k = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 256.0), 0, 255)
    PILImage.fromarray(k.astype(np.uint8), mode="RGB").save(path, format="PNG")


def validate_image(img: np.ndarray, p: int | None = None) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise CanvasError(f"image must be (H, W, 3), got {img.shape}")
    if not np.isfinite(img).all():
        raise CanvasError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise CanvasError("image values must lie in [0, 1]")
    if p is not None and (img.shape[0] % p or img.shape[1] % p):
        raise CanvasError(
            f"image dims {img.shape[:2]} not divisible by patch size {p}"
        )


def encode_image(img: np.ndarray, p: int = 8) -> np.ndarray:
    """Space-to-depth encode an (H, W, 3) image into an (H/p, W/p, 3p^2) latent.

    Values are centered to [-1, 1]; decode_latent inverts bit-exactly.
    """
    img = np.asarray(img, dtype=np.float32)
    validate_image(img, p)
    H, W, _ = img.shape
    h, w = H // p, W // p
    z = img.reshape(h, p, w, p, 3).transpose(0, 2, 1, 3, 4).reshape(h, w, 3 * p * p)
    return np.float32(2.0) * z - np.float32(1.0)


def decode_latent(z: np.ndarray, p: int = 8) -> np.ndarray:
    """Exact inverse of encode_image; output clamped to [0, 1]."""
    z = np.asarray(z, dtype=np.float32)
    if z.ndim != 3:
        raise ValueError(f"latent must be (h, w, c), got {z.shape}")
    h, w, c = z.shape
    if c != 3 * p * p:
        raise ValueError(f"latent channel count {c} != 3*p^2 = {3 * p * p}")
    img = (z + np.float32(1.0)) / np.float32(2.0)
    img = img.reshape(h, w, p, p, 3).transpose(0, 2, 1, 3, 4).reshape(h * p, w * p, 3)
    return np.clip(img, 0.0, 1.0)


def decode_latent_torch(z: torch.Tensor, p: int = 8) -> torch.Tensor:
    """Differentiable decode for (h, w, c) or (B, h, w, c) latent tensors."""
    squeeze = z.dim() == 3
    if squeeze:
        z = z.unsqueeze(0)
    B, h, w, c = z.shape
    if c != 3 * p * p:
        raise ValueError(f"latent channel count {c} != 3*p^2 = {3 * p * p}")
    img = (z + 1.0) / 2.0
    img = img.reshape(B, h, w, p, p, 3).permute(0, 1, 3, 2, 4, 5)
    img = img.reshape(B, h * p, w * p, 3)
    img = img.clamp(0.0, 1.0)
    return img[0] if squeeze else img


@dataclass
class LatentCanvas:
    """Horizontally concatenated latent segments with role metadata.

    values is (h, sum(widths), c); segments run left to right, references
    first, at most one target segment last. Values may be numpy or torch.
    """

    values: object
    segment_widths: list = field(default_factory=list)
    segment_roles: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.segment_widths) != len(self.segment_roles):
            raise CanvasError("segment_widths and segment_roles length mismatch")
        if self.values.ndim != 3:
            raise CanvasError(f"canvas values must be 3D, got {self.values.shape}")
        if sum(self.segment_widths) != self.values.shape[1]:
            raise CanvasError(
                f"segment widths {self.segment_widths} do not sum to canvas "
                f"width {self.values.shape[1]}"
            )
        if self.segment_roles.count(TARGET) > 1:
            raise CanvasError("at most one target segment allowed")
        for role in self.segment_roles:
            if role not in (REFERENCE, TARGET):
                raise CanvasError(f"unknown segment role {role!r}")
        if TARGET in self.segment_roles and self.segment_roles[-1] != TARGET:
            raise CanvasError("target segment must be last")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def segment_bounds(self):
        """Yield (role, col_start, col_end) per segment."""
        start = 0
        for role, w in zip(self.segment_roles, self.segment_widths):
            yield role, start, start + w
            start += w

    def reference_slice(self):
        """Column slice covering all reference segments (contiguous, leftmost)."""
        ref_w = sum(
            w for role, w in zip(self.segment_roles, self.segment_widths)
            if role == REFERENCE
        )
        return slice(0, ref_w)

    def target_slice(self):
        if TARGET not in self.segment_roles:
            return None
        ref_w = self.width - self.segment_widths[-1]
        return slice(ref_w, self.width)


def _cat(parts):
    if isinstance(parts[0], torch.Tensor):
        return torch.cat(parts, dim=1)
    return np.concatenate(parts, axis=1)


def concat_canvas(refs, target=None) -> LatentCanvas:
    """Concatenate reference latents (and an optional target) along width."""
    parts = list(refs)
    roles = [REFERENCE] * len(parts)
    if target is not None:
        parts.append(target)
        roles.append(TARGET)
    if not parts:
        raise CanvasError("cannot build a canvas from zero segments")
    h, c = parts[0].shape[0], parts[0].shape[2]
    for seg in parts:
        if seg.ndim != 3 or seg.shape[0] != h or seg.shape[2] != c:
            raise CanvasError(
                f"segment shape {seg.shape} incompatible with (h={h}, c={c})"
            )
    return LatentCanvas(
        values=_cat(parts),
        segment_widths=[seg.shape[1] for seg in parts],
        segment_roles=roles,
    )


def split_canvas(canvas: LatentCanvas):
    """Invert concat_canvas: returns (list of reference latents, target or None)."""
    refs, target = [], None
    for role, lo, hi in canvas.segment_bounds():
        seg = canvas.values[:, lo:hi, :]
        if role == TARGET:
            target = seg
        else:
            refs.append(seg)
    return refs, target
