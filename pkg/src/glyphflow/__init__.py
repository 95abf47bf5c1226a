"""Desk-scale character-consistent image generation.

A small flow-matching diffusion transformer with three conditioning paths:
an instruction connector feeding the text stream, dense/sparse visual
control adapters with zero-initialized injection, and shared-noise joint
denoising of reference and target latents.
"""

__version__ = "0.1.0"
