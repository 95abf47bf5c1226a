"""The composed generation system.

Bundles the frozen flow backbone with its conditioning stack: caption
embedder, semantic encoder, optional instruction connector, dense/sparse
control adapters, and control branch. Handles text-stream composition, the
canvas layout helpers, and checkpoint packaging for any subset of
components. With the control path disabled (or freshly zero-initialized) a
forward pass reduces exactly to the backbone alone.
"""

from __future__ import annotations

import numpy as np
import torch

from . import codec
from .backbone import Backbone, BackboneConfig, ShapeError, assign_positions
from .checkpoint import (
    CheckpointError,
    arrays_to_state_dict,
    component_names,
    load_checkpoint,
    save_checkpoint,
    state_dict_to_arrays,
)
from .config import RunConfig, default_config
from .connector import (
    InstructionConnector,
    SemanticEncoder,
    StubInstructionEncoder,
    compose_text_stream,
)
from .backbone import CaptionEmbedder
from .control import ControlAdapters, ControlBranch
from .identity import IdentityEncoder
from .vocab import Vocabulary

COMPONENTS = (
    "backbone",
    "caption_embedder",
    "semantic_encoder",
    "instruction_encoder",
    "connector",
    "adapters",
    "branch",
    "identity_encoder",
)


class GenerationSystem:
    def __init__(self, cfg: RunConfig, vocab: Vocabulary, *, backbone=None,
                 caption_embedder=None, semantic_encoder=None,
                 instruction_encoder=None, connector=None, adapters=None,
                 branch=None, identity_encoder=None, joint_denoise=True):
        self.cfg = cfg
        self.vocab = vocab
        self.backbone = backbone
        self.caption_embedder = caption_embedder
        self.semantic_encoder = semantic_encoder
        self.instruction_encoder = instruction_encoder
        self.connector = connector
        self.adapters = adapters
        self.branch = branch
        self.identity_encoder = identity_encoder
        self.joint_denoise = joint_denoise

    # -- layout ------------------------------------------------------------

    @property
    def latent_size(self) -> int:
        return self.cfg.image_size // self.cfg.p

    @property
    def latent_channels(self) -> int:
        return 3 * self.cfg.p * self.cfg.p

    def positions_for(self, n_refs: int, with_target: bool = True, origin=(0, 0)):
        s = self.latent_size
        return assign_positions(
            s, [s] * n_refs, s if with_target else None, origin,
            self.backbone.config.max_positions,
        )

    def to_latent(self, img) -> torch.Tensor:
        if torch.is_tensor(img):
            img = img.detach().cpu().numpy()
        return torch.from_numpy(codec.encode_image(np.asarray(img), self.cfg.p))

    # -- conditioning ------------------------------------------------------

    def encode_symbols(self, tokens) -> torch.Tensor:
        return torch.tensor(self.vocab.encode(tokens), dtype=torch.long)

    def conditioning(self, caption_ids, ref_images=None, instruction_ids=None):
        """Compose the text stream and pooled vector.

        caption_ids: (L,) or (B, L); ref_images: (n, H, W, 3) or
        (B, n, H, W, 3); instruction_ids likewise optional. Returns
        (text_stream, pooled) with a leading batch axis iff inputs had one.
        """
        squeeze = caption_ids.dim() == 1
        ids = caption_ids[None] if squeeze else caption_ids
        text = self.caption_embedder(ids)
        stream = text
        if ref_images is not None:
            refs = ref_images[None] if ref_images.dim() == 4 else ref_images
            b, n = refs.shape[0], refs.shape[1]
            sem = self.semantic_encoder(refs.reshape(b * n, *refs.shape[2:]))
            sem = sem.reshape(b, n, *sem.shape[1:])
            if instruction_ids is not None and self.connector is not None:
                instr = instruction_ids[None] if instruction_ids.dim() == 1 else instruction_ids
                query = self.instruction_encoder(instr, refs[:, 0])
                value = self.connector(query, sem[:, 0])
            else:
                value = sem.mean(dim=1)
            stream = compose_text_stream(value, stream)
            if self.adapters is not None:
                vis = self.adapters.global_visual_token(sem.mean(dim=(1, 2)))
                stream = torch.cat([stream, vis[:, None, :]], dim=1)
        pooled = stream.mean(dim=1)
        if squeeze:
            return stream[0], pooled[0]
        return stream, pooled

    def control_features(self, ref_latents=None, sparse_map=None):
        """Dense features from clean reference latents (never noised) and
        sparse features from the raw map (never through the codec)."""
        dense = None
        if ref_latents is not None and self.adapters is not None:
            dense = self.adapters.dve(ref_latents)
        sparse = None
        if sparse_map is not None and self.adapters is not None:
            sparse = self.adapters.sve(sparse_map)
        return dense, sparse

    # -- forward -----------------------------------------------------------

    def forward(self, noisy_canvas, positions, text_stream, pooled, tau, *,
                dense=None, sparse=None, ref_width=0, alpha=None, beta=None,
                enable_control=True):
        """Velocity over the canvas; the control path adds zero when disabled,
        absent, or still at its zero initialization."""
        if not enable_control or self.branch is None:
            return self.backbone(noisy_canvas, positions, text_stream, pooled, tau)
        alpha = self.cfg.alpha if alpha is None else alpha
        beta = self.cfg.beta if beta is None else beta
        injected = self.adapters.inject(
            noisy_canvas, dense, sparse, alpha, beta, ref_width
        )
        res = self.branch(injected, positions, text_stream, pooled, tau)
        per_block = [res[b % self.branch.n_blocks] for b in range(self.branch.depth)]
        return self.backbone(
            noisy_canvas, positions, text_stream, pooled, tau, per_block
        )

    # -- bookkeeping -------------------------------------------------------

    def modules(self) -> dict:
        out = {}
        for name in COMPONENTS:
            mod = getattr(self, name)
            if mod is not None:
                out[name] = mod
        return out

    def train_only(self, names) -> list:
        """Freeze everything, unfreeze the named components; returns their
        trainable parameters."""
        params = []
        for name, mod in self.modules().items():
            requires = name in names
            for p in mod.parameters():
                p.requires_grad_(requires)
            mod.train(requires)
            if requires:
                params.extend(mod.parameters())
        return params


def build_system(cfg: RunConfig, vocab: Vocabulary, *, with_connector=False,
                 with_control=False, n_identities=0, joint_denoise=True,
                 seed=None) -> GenerationSystem:
    torch.manual_seed(cfg.seed if seed is None else seed)
    lat = cfg.image_size // cfg.p
    bcfg = BackboneConfig(
        depth=cfg.depth, model_dim=cfg.model_dim, heads=cfg.heads,
        text_dim=cfg.feature_dim, latent_channels=3 * cfg.p * cfg.p,
        max_positions=(4 * lat, (cfg.max_refs + 3) * lat),
    )
    backbone = Backbone(bcfg)
    sys = GenerationSystem(
        cfg, vocab,
        backbone=backbone,
        caption_embedder=CaptionEmbedder(len(vocab), cfg.feature_dim),
        semantic_encoder=SemanticEncoder(cfg.feature_dim, cfg.m_tokens),
        identity_encoder=IdentityEncoder(n_identities) if n_identities else None,
        joint_denoise=joint_denoise,
    )
    if with_connector:
        sys.instruction_encoder = StubInstructionEncoder(
            len(vocab), cfg.feature_dim, cfg.image_size
        )
        sys.connector = InstructionConnector(cfg.d, cfg.l, cfg.feature_dim)
    if with_control:
        sys.adapters = ControlAdapters(
            sys.latent_channels, cfg.feature_dim, cfg.feature_dim, cfg.p
        )
        sys.branch = ControlBranch(backbone, cfg.n_blocks)
    return sys


def save_system(path, system: GenerationSystem, stage: str, step: int,
                extra_meta=None) -> None:
    arrays = {}
    for name, mod in system.modules().items():
        arrays.update(state_dict_to_arrays(mod, name))
    meta = {
        "stage": stage,
        "step": int(step),
        "config": dict(system.cfg),
        "vocab": list(system.vocab.symbols),
        "joint_denoise": bool(system.joint_denoise),
        "n_identities": (
            system.identity_encoder.n_classes if system.identity_encoder else 0
        ),
    }
    meta.update(extra_meta or {})
    save_checkpoint(path, arrays, meta)


def load_system(path, require=()) -> tuple:
    """Rebuild a GenerationSystem from a checkpoint; returns (system, meta)."""
    arrays, meta = load_checkpoint(path)
    present = set(component_names(arrays))
    missing = [r for r in require if r not in present]
    if missing:
        raise CheckpointError(f"{path}: missing components {missing}")
    cfg = default_config(**meta["config"])
    vocab = Vocabulary(meta["vocab"])
    sys = build_system(
        cfg, vocab,
        with_connector="connector" in present,
        with_control="branch" in present,
        n_identities=meta.get("n_identities", 0),
        joint_denoise=meta.get("joint_denoise", True),
    )
    for name in COMPONENTS:
        mod = getattr(sys, name)
        if mod is None and name in present:
            raise CheckpointError(f"{path}: unexpected component {name!r}")
        if mod is not None and name not in present:
            setattr(sys, name, None)
            continue
        if mod is not None:
            mod.load_state_dict(arrays_to_state_dict(arrays, name))
            mod.eval()
    return sys, meta
