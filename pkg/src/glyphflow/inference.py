"""Sampling.

The canvas holds reference segments and the generation target side by side.
One noise realization covers the whole canvas: the target starts from pure
noise, the references start at their skip-ahead level and stay pinned until
the integration time drops to that level, after which every segment moves
together. A skip level of zero therefore keeps the references clean for the
entire run, which is also how checkpoints trained with clean references are
meant to be sampled.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .codec import decode_latent, encode_image


class SamplingError(ValueError):
    """Invalid sampling request."""


def skip_ahead_noise(clean: torch.Tensor, t_match: float,
                     eps: torch.Tensor) -> torch.Tensor:
    """Place a clean latent at noise level t_match on the straight path:
    (1 - t) clean + t eps. t_match = 0 returns the input untouched."""
    t = float(t_match)
    if not 0.0 <= t <= 1.0:
        raise SamplingError(f"t_match outside [0,1]: {t_match}")
    if clean.shape != eps.shape:
        raise SamplingError(
            f"latent {tuple(clean.shape)} vs noise {tuple(eps.shape)}")
    if t == 0.0:
        return clean
    return (1.0 - t) * clean + t * eps


@dataclass
class ConditionBundle:
    """Everything one call to sample() conditions on.

    Unset numeric fields fall back to the system's config. The prompt and
    instruction are plain symbol lists; instructions route through the
    connector and therefore need at least one reference image.
    """

    ref_images: list = None
    pose_map: np.ndarray = None
    prompt: list = None
    instruction: list = None
    alpha: float = None
    beta: float = None
    skip_t: float = None
    steps: int = None
    seed: int = 0

    def __post_init__(self):
        has_refs = bool(self.ref_images)
        has_prompt = self.prompt is not None and len(self.prompt) > 0
        if not has_refs and not has_prompt:
            raise SamplingError("need a prompt, reference images, or both")
        if self.instruction is not None and not has_refs:
            raise SamplingError("an instruction needs a reference image")
        if self.skip_t is not None and not 0.0 <= float(self.skip_t) <= 1.0:
            raise SamplingError(f"skip_t outside [0,1]: {self.skip_t}")
        if self.steps is not None and int(self.steps) < 1:
            raise SamplingError(f"steps must be >= 1, got {self.steps}")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if v is not None and float(v) < 0:
                raise SamplingError(f"{name} must be >= 0, got {v}")


@dataclass
class SampleResult:
    image: np.ndarray          # (H, W, 3) float32 in [0, 1]
    recons: list               # one decoded image per reference segment
    canvas: np.ndarray         # final latent canvas, (h, w_total, c)
    meta: dict = field(default_factory=dict)


def _as_image(arr, size: int, what: str) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float32)
    if a.shape != (size, size, 3):
        raise SamplingError(f"{what} must be ({size}, {size}, 3), "
                            f"got {tuple(a.shape)}")
    return a


def sample(system, bundle: ConditionBundle) -> SampleResult:
    """Euler integration of the velocity field from tau = 1 down to 0."""
    cfg = system.cfg
    steps = cfg.steps if bundle.steps is None else int(bundle.steps)
    skip_t = cfg.skip_t if bundle.skip_t is None else float(bundle.skip_t)
    alpha = cfg.alpha if bundle.alpha is None else float(bundle.alpha)
    beta = cfg.beta if bundle.beta is None else float(bundle.beta)
    size = cfg.image_size
    lat = system.latent_size

    refs = [_as_image(r, size, f"reference {i}")
            for i, r in enumerate(bundle.ref_images or [])]
    if len(refs) > cfg.max_refs:
        raise SamplingError(f"{len(refs)} references exceed max_refs "
                            f"{cfg.max_refs}")
    n_refs = len(refs)
    ref_w = n_refs * lat
    pose = None
    if bundle.pose_map is not None:
        pose = torch.from_numpy(_as_image(bundle.pose_map, size, "pose map"))

    was_training = {n: m.training for n, m in system.modules().items()}
    for m in system.modules().values():
        m.eval()
    try:
        with torch.no_grad():
            cap_ids = system.encode_symbols(list(bundle.prompt or []))[None]
            ref_t = None
            if n_refs:
                ref_t = torch.from_numpy(np.stack(refs))[None]
            instr_ids = None
            if bundle.instruction is not None:
                instr_ids = system.encode_symbols(list(bundle.instruction))[None]
            text, pooled = system.conditioning(cap_ids, ref_t, instr_ids)

            ref_lat = None
            dense = sparse = None
            if n_refs:
                ref_lat = torch.cat(
                    [torch.from_numpy(encode_image(r, cfg.p)) for r in refs],
                    dim=1)[None]
            if system.adapters is not None:
                dense, sparse = system.control_features(
                    ref_lat, pose[None] if pose is not None else None)

            gen = torch.Generator().manual_seed(int(bundle.seed))
            eps = torch.randn((1, lat, ref_w + lat, system.latent_channels),
                              generator=gen)
            canvas = eps.clone()
            if n_refs:
                canvas[:, :, :ref_w] = skip_ahead_noise(
                    ref_lat, skip_t, eps[:, :, :ref_w])

            positions = system.positions_for(n_refs)
            grid = torch.linspace(1.0, 0.0, steps + 1)
            for i in range(steps):
                t0, t1 = float(grid[i]), float(grid[i + 1])
                pred = system.forward(
                    canvas, positions, text, pooled, torch.tensor(t0),
                    dense=dense, sparse=sparse, ref_width=ref_w,
                    alpha=alpha, beta=beta)
                stepped = canvas - (t0 - t1) * pred
                if n_refs and t0 > skip_t:
                    # references stay pinned until the target catches up
                    stepped[:, :, :ref_w] = canvas[:, :, :ref_w]
                canvas = stepped

        final = canvas[0].numpy()
        image = decode_latent(final[:, ref_w:], cfg.p)
        recons = [decode_latent(final[:, i * lat:(i + 1) * lat], cfg.p)
                  for i in range(n_refs)]
    finally:
        for n, m in system.modules().items():
            m.train(was_training[n])

    meta = {
        "prompt": " ".join(bundle.prompt or []),
        "instruction": " ".join(bundle.instruction) if bundle.instruction else "",
        "n_refs": n_refs,
        "steps": steps,
        "skip_t": skip_t,
        "alpha": alpha,
        "beta": beta,
        "seed": int(bundle.seed),
        "joint_denoise": bool(system.joint_denoise),
    }
    return SampleResult(image, recons, final, meta)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Inverse of the loader's u8/256 scaling; exact on codec round trips."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float32) * 256.0),
                   0, 255).astype(np.uint8)


def save_outputs(result: SampleResult, out_dir) -> dict:
    """Write generated.png, one recon per reference, and a key=value sidecar;
    returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    def put(name, img):
        path = os.path.join(out_dir, name)
        Image.fromarray(to_uint8(img)).save(path)
        paths[name] = path

    put("generated.png", result.image)
    for i, rec in enumerate(result.recons):
        put(f"recon_{i:02d}.png", rec)
    meta_path = os.path.join(out_dir, "meta.txt")
    with open(meta_path, "w", encoding="utf-8") as f:
        for key in sorted(result.meta):
            f.write(f"{key}={result.meta[key]}\n")
    paths["meta.txt"] = meta_path
    return paths
