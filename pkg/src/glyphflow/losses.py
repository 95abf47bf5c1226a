"""Flow-matching losses over joint canvases plus the identity objective.

One noise draw covers the whole canvas, reference and target segments alike;
the velocity target is (noise - clean) everywhere, which makes reference
segments regress toward reconstructing their clean latents while the target
segment regresses toward the ground-truth image, in a single objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


class LossError(ValueError):
    pass


@dataclass
class DiffusionStep:
    """One training step's time and shared noise realization; tau may be a
    scalar or a per-item tensor."""

    tau: object
    eps: torch.Tensor

    def __post_init__(self):
        t = self.tau if torch.is_tensor(self.tau) else torch.tensor(float(self.tau))
        if ((t < 0) | (t > 1)).any():
            raise LossError(f"tau outside [0,1]: {self.tau}")

    def tau_like(self, x: torch.Tensor):
        t = self.tau
        if torch.is_tensor(t) and t.dim() == 1:
            return t.view(-1, *([1] * (x.dim() - 1))).to(x.dtype)
        return t


def step_noise(stage_seed: int, step_index: int, shape, dtype=torch.float32):
    """The canonical noise draw for (stage seed, step); reproducible so the
    shared-noise contract can be audited after the fact."""
    gen = torch.Generator().manual_seed((int(stage_seed) << 20) ^ int(step_index))
    return torch.randn(shape, generator=gen, dtype=dtype)


def noise_canvas(canvas_clean: torch.Tensor, step: DiffusionStep) -> torch.Tensor:
    """Straight-path interpolation x_tau = (1-tau) x0 + tau eps, one eps
    realization across every segment."""
    if canvas_clean.shape != step.eps.shape:
        raise LossError(
            f"canvas {tuple(canvas_clean.shape)} vs noise {tuple(step.eps.shape)}"
        )
    tau = step.tau_like(canvas_clean)
    return (1.0 - tau) * canvas_clean + tau * step.eps


def equ_loss(pred: torch.Tensor, step: DiffusionStep,
             canvas_clean: torch.Tensor) -> torch.Tensor:
    """MSE between the prediction and (eps - clean) over the whole canvas."""
    if pred.shape != canvas_clean.shape or pred.shape != step.eps.shape:
        raise LossError(
            f"shape mismatch: pred {tuple(pred.shape)}, clean "
            f"{tuple(canvas_clean.shape)}, eps {tuple(step.eps.shape)}"
        )
    return ((pred - (step.eps - canvas_clean)) ** 2).mean()


def id_loss(z_gen: torch.Tensor, z_ref: torch.Tensor) -> torch.Tensor:
    """1 - cosine(z_gen, z_ref); 0 at equal, 1 at orthogonal, 2 at antipodal."""
    if z_gen.shape != z_ref.shape:
        raise LossError(
            f"embedding shapes differ: {tuple(z_gen.shape)} vs {tuple(z_ref.shape)}"
        )
    ng = z_gen.norm(dim=-1)
    nr = z_ref.norm(dim=-1)
    if (ng < 1e-12).any() or (nr < 1e-12).any():
        raise LossError("zero-norm identity embedding")
    cos = (z_gen * z_ref).sum(dim=-1) / (ng * nr)
    return (1.0 - cos).mean()


def total_loss(l_equ, l_id, lam: float):
    """l_equ + lam * l_id with finiteness checks."""
    for name, v in (("l_equ", l_equ), ("l_id", l_id), ("lambda", lam)):
        val = float(v.detach()) if torch.is_tensor(v) else float(v)
        if val != val or val in (float("inf"), float("-inf")):
            raise LossError(f"non-finite {name}: {val}")
    return l_equ + lam * l_id


def one_step_estimate(noisy: torch.Tensor, pred: torch.Tensor, tau) -> torch.Tensor:
    """Clean-canvas estimate x0 = x_tau - tau * v, differentiable in pred."""
    if noisy.shape != pred.shape:
        raise LossError("one-step estimate shape mismatch")
    if torch.is_tensor(tau) and tau.dim() == 1:
        tau = tau.view(-1, *([1] * (noisy.dim() - 1)))
    return noisy - tau * pred
