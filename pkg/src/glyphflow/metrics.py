"""Scalar metrics for generated images.

identity_similarity and image_similarity are cosines in the identity and
semantic feature spaces; instruction_alignment checks attribute tokens
against the palette probes.
"""

from __future__ import annotations

import warnings

import numpy as np
import torch

from .data_synth import (
    ACCESSORIES,
    BACKGROUNDS,
    FIGURE_COLORS,
    MOTIFS,
    SHAPES,
    match_caption,
)

_KNOWN_VALUES = {
    "shape": set(SHAPES),
    "primary": {n for n, _ in FIGURE_COLORS},
    "secondary": {n for n, _ in FIGURE_COLORS},
    "acc": set(ACCESSORIES),
    "motif": set(MOTIFS),
    "bg": {n for n, _ in BACKGROUNDS},
}


def _to_tensor(img) -> torch.Tensor:
    if torch.is_tensor(img):
        return img.float()
    return torch.from_numpy(np.asarray(img, dtype=np.float32))


def _cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    na = float(a.norm())
    nb = float(b.norm())
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float((a * b).sum()) / (na * nb)


def identity_similarity(identity_encoder, generated, reference) -> float:
    """Cosine between identity embeddings; 1.0 means same identity."""
    with torch.no_grad():
        z_gen = identity_encoder.extract_identity(_to_tensor(generated))
        z_ref = identity_encoder.extract_identity(_to_tensor(reference))
    return _cosine(z_gen, z_ref)


def image_similarity(semantic_encoder, image_a, image_b) -> float:
    """Cosine between pooled semantic features of two images."""
    with torch.no_grad():
        fa = semantic_encoder.pooled(_to_tensor(image_a))
        fb = semantic_encoder.pooled(_to_tensor(image_b))
    return _cosine(fa, fb)


def instruction_alignment(image, tokens) -> float:
    """Fraction of attribute tokens the probes find satisfied.

    Tokens without an attr:value shape (like the edit marker) are skipped.
    Unknown attributes or values count as unsatisfied and emit a warning.
    An empty attribute set scores 1.0.
    """
    attr_tokens = []
    for tok in tokens:
        attr, sep, value = str(tok).partition(":")
        if not sep:
            continue
        attr_tokens.append(str(tok))
        if attr not in _KNOWN_VALUES or value not in _KNOWN_VALUES[attr]:
            warnings.warn(f"unknown attribute token {tok!r} counts as "
                          "unsatisfied", stacklevel=2)
    if not attr_tokens:
        return 1.0
    img = np.asarray(image, dtype=np.float32)
    flags = match_caption(img, attr_tokens)
    return float(sum(flags)) / len(flags)
