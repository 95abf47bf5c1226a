"""Staged trainer.

Stages run in a fixed order, each consuming the previous stage's checkpoint:
generator pretraining (plus the identity classifier), instruction-connector
alignment, one-to-one warmup, one-to-many training, and finally the
shared-noise stage in which references are noised together with the target.
"""

from __future__ import annotations

import csv
import os

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .checkpoint import (
    arrays_to_state_dict,
    component_names,
    load_checkpoint,
    save_checkpoint,
    state_dict_to_arrays,
)
from .codec import decode_latent_torch, encode_image
from .config import RunConfig, default_config
from .connector import (
    InstructionConnector,
    SemanticEncoder,
    StubInstructionEncoder,
    connector_loss,
)
from .data_synth import group_records, read_manifest
from .losses import (
    DiffusionStep,
    equ_loss,
    id_loss,
    noise_canvas,
    one_step_estimate,
    step_noise,
    total_loss,
)
from .pipeline import build_system, load_system, save_system
from .vocab import Vocabulary


class StageError(RuntimeError):
    """Raised when a stage is misconfigured or missing a prerequisite."""


STAGES = ("pretrain", "connector", "warmup_1to1", "main_1toMany", "equivariant")

# distinct noise streams per stage; see losses.step_noise
_ORDINAL = {"pretrain": 1, "identity": 2, "connector": 3,
            "warmup_1to1": 4, "main_1toMany": 5, "equivariant": 6}

# model-shape keys that must agree between a config and a checkpoint
_DIM_KEYS = ("p", "image_size", "depth", "model_dim", "heads", "feature_dim",
             "m_tokens", "d", "l", "n_blocks", "max_refs")


def _stage_seed(seed: int, stage: str) -> int:
    return (int(seed) << 3) | _ORDINAL[stage]


def _step_rng(seed: int, stage: str, step: int) -> np.random.Generator:
    # keyed by absolute step so a resumed run samples the same batches
    return np.random.default_rng([int(seed), _ORDINAL[stage], int(step)])


def check_dims(cfg: RunConfig, meta_config: dict, source: str) -> None:
    """Refuse to mix a config with a checkpoint of different model shape."""
    bad = [k for k in _DIM_KEYS if meta_config.get(k) != cfg[k]]
    if bad:
        pairs = ", ".join(f"{k}: {meta_config.get(k)} vs {cfg[k]}" for k in bad)
        raise StageError(f"{source} was trained with a different shape ({pairs})")


# ---------------------------------------------------------------------------
# data access


class TrainingData:
    """Manifest-backed image store; decoded pixels are cached as float32."""

    def __init__(self, manifest_path):
        self.manifest_path = manifest_path
        self.records = read_manifest(manifest_path)
        if not self.records:
            raise StageError(f"{manifest_path}: manifest has no records")
        self.train = [r for r in self.records if r.split == "train"]
        self.test = [r for r in self.records if r.split == "test"]
        if not self.train:
            raise StageError(f"{manifest_path}: no training records")
        self.by_identity: dict = {}
        for rec in self.train:
            self.by_identity.setdefault(rec.identity_id, []).append(rec)
        self.groups = group_records(self.records)
        self._cache: dict = {}
        self.image_size = self.image(self.records[0]).shape[0]

    def _load(self, path: str) -> np.ndarray:
        arr = self._cache.get(path)
        if arr is None:
            with Image.open(path) as im:
                u8 = np.asarray(im.convert("RGB"), dtype=np.uint8)
            arr = u8.astype(np.float32) / np.float32(256.0)
            self._cache[path] = arr
        return arr

    def image(self, rec) -> np.ndarray:
        return self._load(rec.image_path)

    def pose(self, rec) -> np.ndarray:
        return self._load(rec.pose_path)

    def editing_pairs(self) -> list:
        pairs = [(g[0], g[1]) for name, g in sorted(self.groups.items())
                 if name.startswith("t") and len(g) == 2]
        return pairs


def _stack_images(data: TrainingData, recs) -> torch.Tensor:
    return torch.from_numpy(np.stack([data.image(r) for r in recs]))


def _stack_poses(data: TrainingData, recs) -> torch.Tensor:
    return torch.from_numpy(np.stack([data.pose(r) for r in recs]))


def _latents(data: TrainingData, recs, p: int) -> torch.Tensor:
    return torch.from_numpy(np.stack([encode_image(data.image(r), p) for r in recs]))


def _caption_ids(system, recs, scene_only: bool = False) -> torch.Tensor:
    rows = []
    for rec in recs:
        toks = [t for t in rec.caption if t.startswith("bg:")] if scene_only \
            else list(rec.caption)
        rows.append(system.encode_symbols(toks))
    return torch.stack(rows)


# ---------------------------------------------------------------------------
# logging


class CsvLog:
    """CSV log with a fixed header; truncates stale files unless appending
    (resumed stages append so earlier rows survive)."""

    def __init__(self, path, fields, append=False):
        self.path = path
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        fresh = (not append or not os.path.exists(path)
                 or os.path.getsize(path) == 0)
        self._f = open(path, "a" if append else "w", newline="",
                       encoding="utf-8")
        self._w = csv.writer(self._f)
        if fresh:
            self._w.writerow(fields)
            self._f.flush()

    def append(self, *values):
        # .10g keeps sums of logged terms consistent to well under 1e-6
        self._w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in values])
        self._f.flush()

    def close(self):
        self._f.close()


def _loss_log(log_dir, stage, append=False):
    if log_dir is None:
        return None
    return CsvLog(os.path.join(log_dir, f"loss_{stage}.csv"),
                  ("step", "l_equ", "l_id", "l_total"), append=append)


# ---------------------------------------------------------------------------
# stage 1: generator pretraining + identity classifier


# weight of the auxiliary identity head on pooled semantic features; without
# it pooled cosines are background-dominated and carry no subject signal
_SEM_CE_WEIGHT = 0.1


def pretrain(cfg: RunConfig, manifest_path, out_path, *, seed=None,
             log_dir=None, resume=False) -> str:
    """Train the backbone, caption embedder and semantic encoder on single
    segments placed at randomized origins, then fit the identity classifier.

    Conditioning is mixed per step: caption only, caption plus the image
    itself as reference, or caption plus another scene of the same identity.
    A small identity-classification head rides on the semantic encoder's
    pooled features so they stay discriminative; it is scaffolding and is not
    saved with the system.
    """
    seed = cfg.seed if seed is None else int(seed)
    data = TrainingData(manifest_path)
    if data.image_size != cfg.image_size:
        raise StageError(f"dataset images are {data.image_size}px, "
                         f"config expects {cfg.image_size}px")
    vocab = Vocabulary.load(os.path.join(os.path.dirname(
        os.path.abspath(manifest_path)), "vocab.txt"))
    n_ids = len(data.by_identity)

    start_step = 0
    if resume and os.path.exists(out_path):
        system, meta = load_system(out_path)
        if meta["stage"] != "pretrain":
            raise StageError(f"{out_path} holds stage {meta['stage']!r}, "
                             "cannot resume pretrain from it")
        check_dims(cfg, meta["config"], out_path)
        start_step = meta["step"]
    else:
        system = build_system(cfg, vocab, n_identities=n_ids, seed=seed)

    classes = sorted(data.by_identity)
    index = {ident: i for i, ident in enumerate(classes)}
    torch.manual_seed(_stage_seed(seed, "pretrain") + 1)
    sem_head = torch.nn.Linear(cfg.feature_dim, n_ids)

    params = system.train_only(("backbone", "caption_embedder", "semantic_encoder"))
    opt = torch.optim.Adam(list(params) + list(sem_head.parameters()), lr=cfg.lr)
    lat = system.latent_size
    max_r0 = 3 * lat
    max_c0 = (cfg.max_refs + 2) * lat
    log = _loss_log(log_dir, "pretrain", append=start_step > 0)
    sem_log = None
    if log_dir is not None:
        sem_log = CsvLog(os.path.join(log_dir, "loss_semantic.csv"),
                         ("step", "cross_entropy", "accuracy"),
                         append=start_step > 0)
    save_every = max(500, cfg.iters_pretrain // 4)
    pool = data.train

    for step in range(start_step, cfg.iters_pretrain):
        rng = _step_rng(seed, "pretrain", step)
        recs = [pool[i] for i in rng.integers(0, len(pool), size=cfg.batch)]
        clean = _latents(data, recs, cfg.p)
        mode = rng.random()
        refs = None
        if mode >= 0.4:
            if mode < 0.7:
                ref_recs = recs
            else:
                ref_recs = []
                for rec in recs:
                    sibs = data.by_identity[rec.identity_id]
                    ref_recs.append(sibs[int(rng.integers(len(sibs)))])
            refs = _stack_images(data, ref_recs)[:, None]
        cap_ids = _caption_ids(system, recs)
        text, pooled = system.conditioning(cap_ids, refs)
        origin = (int(rng.integers(0, max_r0 + 1)), int(rng.integers(0, max_c0 + 1)))
        positions = system.positions_for(0, with_target=True, origin=origin)
        taus = torch.from_numpy(rng.random(cfg.batch)).float()
        dstep = DiffusionStep(taus, step_noise(_stage_seed(seed, "pretrain"),
                                               step, clean.shape))
        pred = system.forward(noise_canvas(clean, dstep), positions, text,
                              pooled, taus, enable_control=False)
        loss = equ_loss(pred, dstep, clean)
        labels = torch.tensor([index[r.identity_id] for r in recs])
        logits = sem_head(system.semantic_encoder.pooled(_stack_images(data, recs)))
        sem_ce = F.cross_entropy(logits, labels)
        opt.zero_grad()
        (loss + _SEM_CE_WEIGHT * sem_ce).backward()
        opt.step()
        if step % 25 == 0 or step + 1 == cfg.iters_pretrain:
            if log:
                log.append(step, loss.item(), 0.0, loss.item())
            if sem_log:
                acc = float((logits.argmax(dim=-1) == labels).float().mean())
                sem_log.append(step, sem_ce.item(), acc)
        if (step + 1) % save_every == 0:
            save_system(out_path, system, "pretrain", step + 1)

    _train_identity(cfg, system, data, seed, log_dir)
    save_system(out_path, system, "pretrain", cfg.iters_pretrain)
    if log:
        log.close()
    if sem_log:
        sem_log.close()
    return out_path


def _train_identity(cfg, system, data, seed, log_dir) -> None:
    """Cross-entropy over the training identities; the embedding head then
    serves as the frozen identity feature extractor."""
    classes = sorted(data.by_identity)
    index = {ident: i for i, ident in enumerate(classes)}
    params = system.train_only(("identity_encoder",))
    opt = torch.optim.Adam(params, lr=1e-3)
    log = None
    if log_dir is not None:
        log = CsvLog(os.path.join(log_dir, "loss_identity.csv"),
                     ("step", "cross_entropy", "accuracy"))
    pool = data.train
    for step in range(cfg.iters_identity):
        rng = _step_rng(seed, "identity", step)
        recs = [pool[i] for i in rng.integers(0, len(pool), size=32)]
        imgs = _stack_images(data, recs)
        labels = torch.tensor([index[r.identity_id] for r in recs])
        logits = system.identity_encoder.logits(imgs)
        loss = F.cross_entropy(logits, labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log and (step % 25 == 0 or step + 1 == cfg.iters_identity):
            acc = float((logits.argmax(dim=-1) == labels).float().mean())
            log.append(step, loss.item(), acc)
    system.identity_encoder.eval()
    for p in system.identity_encoder.parameters():
        p.requires_grad_(False)
    if log:
        log.close()


# ---------------------------------------------------------------------------
# stage 2: instruction connector


def train_connector(cfg: RunConfig, manifest_path, pretrain_path, out_path, *,
                    seed=None, log_dir=None) -> str:
    """Align the connector on editing pairs: value(instruction, source) should
    land on the target's semantic features.

    Only the semantic encoder is read from the pretrain checkpoint; the
    generator itself is never constructed here.
    """
    seed = cfg.seed if seed is None else int(seed)
    if not os.path.exists(pretrain_path):
        raise StageError(f"missing pretrain checkpoint {pretrain_path}; "
                         "run the pretrain stage first")
    arrays, meta = load_checkpoint(pretrain_path)
    if "semantic_encoder" not in component_names(arrays):
        raise StageError(f"{pretrain_path} has no semantic encoder; "
                         "run the pretrain stage first")
    check_dims(cfg, meta["config"], pretrain_path)
    vocab = Vocabulary(meta["vocab"])

    torch.manual_seed(seed)
    sem = SemanticEncoder(cfg.feature_dim, cfg.m_tokens)
    sem.load_state_dict(arrays_to_state_dict(arrays, "semantic_encoder"))
    sem.eval()
    for p in sem.parameters():
        p.requires_grad_(False)
    stub = StubInstructionEncoder(len(vocab), cfg.feature_dim, cfg.image_size)
    conn = InstructionConnector(cfg.d, cfg.l, cfg.feature_dim)

    data = TrainingData(manifest_path)
    if data.image_size != cfg.image_size:
        raise StageError(f"dataset images are {data.image_size}px, "
                         f"config expects {cfg.image_size}px")
    pairs = data.editing_pairs()
    if not pairs:
        raise StageError(f"{manifest_path} has no editing pairs; build a "
                         "dataset in editing_triples mode for this stage")

    opt = torch.optim.Adam(
        list(stub.parameters()) + list(conn.parameters()), lr=cfg.lr)
    log = None
    if log_dir is not None:
        log = CsvLog(os.path.join(log_dir, "loss_connector.csv"), ("step", "loss"))

    def encode_ids(toks):
        return torch.tensor(vocab.encode(list(toks)), dtype=torch.long)

    for step in range(cfg.iters_connector):
        rng = _step_rng(seed, "connector", step)
        batch = [pairs[i] for i in rng.integers(0, len(pairs), size=cfg.batch)]
        src = _stack_images(data, [a for a, _ in batch])
        dst = _stack_images(data, [b for _, b in batch])
        instr = torch.stack([encode_ids(b.caption) for _, b in batch])
        with torch.no_grad():
            key = sem(src)
            target = sem(dst)
        value = conn(stub(instr, src), key)
        loss = connector_loss(value, target)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log and (step % 25 == 0 or step + 1 == cfg.iters_connector):
            log.append(step, loss.item())

    out_arrays = {}
    out_arrays.update(state_dict_to_arrays(stub, "instruction_encoder"))
    out_arrays.update(state_dict_to_arrays(conn, "connector"))
    out_arrays.update(state_dict_to_arrays(sem, "semantic_encoder"))
    save_checkpoint(out_path, out_arrays, {
        "stage": "connector",
        "step": cfg.iters_connector,
        "config": dict(cfg),
        "vocab": list(vocab.symbols),
        "joint_denoise": True,
        "n_identities": 0,
    })
    if log:
        log.close()
    return out_path


# ---------------------------------------------------------------------------
# stages 3-5: visual control


def assemble_control_system(cfg: RunConfig, pretrain_path, connector_path, *,
                            seed=None):
    """Combine the pretrained generator with the trained connector and attach
    fresh (zero-initialized) control adapters and a control branch."""
    from .control import ControlAdapters, ControlBranch

    seed = cfg.seed if seed is None else int(seed)
    if not os.path.exists(pretrain_path):
        raise StageError(f"missing pretrain checkpoint {pretrain_path}; "
                         "run the pretrain stage first")
    if not os.path.exists(connector_path):
        raise StageError(f"missing connector checkpoint {connector_path}; "
                         "run the connector stage first")
    system, meta = load_system(
        pretrain_path,
        require=("backbone", "caption_embedder", "semantic_encoder",
                 "identity_encoder"),
    )
    if meta["stage"] != "pretrain":
        raise StageError(f"{pretrain_path} holds stage {meta['stage']!r}, "
                         "expected a pretrain checkpoint")
    check_dims(cfg, meta["config"], pretrain_path)
    carrays, cmeta = load_checkpoint(connector_path)
    names = set(component_names(carrays))
    if not {"instruction_encoder", "connector"} <= names:
        raise StageError(f"{connector_path} has no trained connector; "
                         "run the connector stage first")
    check_dims(cfg, cmeta["config"], connector_path)

    torch.manual_seed(seed)
    system.instruction_encoder = StubInstructionEncoder(
        len(system.vocab), cfg.feature_dim, cfg.image_size)
    system.instruction_encoder.load_state_dict(
        arrays_to_state_dict(carrays, "instruction_encoder"))
    system.connector = InstructionConnector(cfg.d, cfg.l, cfg.feature_dim)
    system.connector.load_state_dict(arrays_to_state_dict(carrays, "connector"))
    system.adapters = ControlAdapters(
        system.latent_channels, cfg.feature_dim, cfg.feature_dim, cfg.p)
    system.branch = ControlBranch(system.backbone, cfg.n_blocks)
    return system


def _pick_many(data: TrainingData, rng, batch: int, max_refs: int):
    """Batch of (refs, target) draws: same identity, disjoint scenes, and one
    shared reference count so tensors stack."""
    multi = [i for i, recs in data.by_identity.items() if len(recs) >= 2]
    if not multi:
        raise StageError("one-to-many training needs identities with at "
                         "least two scenes")
    widest = max(len(data.by_identity[i]) for i in multi) - 1
    n_refs = int(rng.integers(1, min(max_refs, widest) + 1))
    pool = [i for i in multi if len(data.by_identity[i]) >= n_refs + 1]
    ref_rows, targets = [], []
    for ident in (pool[j] for j in rng.integers(0, len(pool), size=batch)):
        recs = data.by_identity[ident]
        picks = rng.permutation(len(recs))[: n_refs + 1]
        ref_rows.append([recs[k] for k in picks[:-1]])
        targets.append(recs[picks[-1]])
    return ref_rows, targets, n_refs


def _run_ip(system, data: TrainingData, cfg: RunConfig, out_path, *, stage,
            seed, iters, lambda_id, use_dense, log_dir, start_step=0,
            probe_fn=None, probe_every=0, probe_ema=0.0) -> str:
    params = system.train_only(("adapters", "branch"))
    opt = torch.optim.Adam(params, lr=cfg.lr)
    lat, p = system.latent_size, cfg.p
    noised_refs = stage == "equivariant"
    log = _loss_log(log_dir, stage, append=start_step > 0)
    probe_log = None
    if probe_fn is not None and probe_every > 0 and log_dir is not None:
        probe_log = CsvLog(os.path.join(log_dir, f"probe_{stage}.csv"),
                           ("step", "id_sim"), append=start_step > 0)
    # probes read an exponential moving average of the trained weights, the
    # usual evaluation practice for diffusion models; raw SGD iterates wobble
    # far more than the trend the probe is after
    shadow = None
    if probe_log is not None and probe_ema > 0:
        shadow = [q.detach().clone() for q in params]
    save_every = max(200, iters // 5)
    extra = {"ref_mode": "noised" if noised_refs else "clean",
             "use_dense": bool(use_dense), "lambda_id": float(lambda_id)}

    for step in range(start_step, iters):
        rng = _step_rng(seed, stage, step)
        if stage == "warmup_1to1":
            recs = [data.train[i]
                    for i in rng.integers(0, len(data.train), size=cfg.batch)]
            ref_rows, targets, n_refs = [[r] for r in recs], recs, 1
        else:
            ref_rows, targets, n_refs = _pick_many(data, rng, cfg.batch,
                                                   cfg.max_refs)
        ref_w = n_refs * lat

        ref_imgs = torch.stack([_stack_images(data, row) for row in ref_rows])
        ref_lat = torch.stack([
            torch.cat([torch.from_numpy(encode_image(data.image(r), p))
                       for r in row], dim=1)
            for row in ref_rows])
        tgt_lat = _latents(data, targets, p)
        canvas = torch.cat([ref_lat, tgt_lat], dim=2)
        pose = _stack_poses(data, targets)

        # identity attributes drop out of the caption half the time, so the
        # references stay the only reliable identity source
        scene_only = bool(rng.random() < 0.5)
        cap_ids = _caption_ids(system, targets, scene_only=scene_only)
        text, pooled = system.conditioning(cap_ids, ref_imgs)
        dense, sparse = system.control_features(
            ref_lat if use_dense else None, pose)
        positions = system.positions_for(n_refs)
        taus = torch.from_numpy(rng.random(cfg.batch)).float()
        eps = step_noise(_stage_seed(seed, stage), step, canvas.shape)
        dstep = DiffusionStep(taus, eps)

        if noised_refs:
            noisy = noise_canvas(canvas, dstep)
        else:
            noisy = canvas.clone()
            noisy[:, :, ref_w:] = noise_canvas(
                tgt_lat, DiffusionStep(taus, eps[:, :, ref_w:]))

        pred = system.forward(noisy, positions, text, pooled, taus,
                              dense=dense, sparse=sparse, ref_width=ref_w)
        if noised_refs:
            l_equ = equ_loss(pred, dstep, canvas)
            l_id = torch.zeros(())
            if lambda_id > 0:
                x0 = one_step_estimate(noisy[:, :, ref_w:], pred[:, :, ref_w:],
                                       taus)
                z_gen = system.identity_encoder.extract_identity(
                    decode_latent_torch(x0, p))
                z_ref = system.identity_encoder.extract_identity(
                    ref_imgs[:, 0]).detach()
                l_id = id_loss(z_gen, z_ref)
            loss = total_loss(l_equ, l_id, lambda_id)
        else:
            l_equ = equ_loss(pred[:, :, ref_w:],
                             DiffusionStep(taus, eps[:, :, ref_w:]), tgt_lat)
            l_id = torch.zeros(())
            loss = l_equ

        opt.zero_grad()
        loss.backward()
        opt.step()
        if shadow is not None:
            with torch.no_grad():
                for e, q in zip(shadow, params):
                    e.mul_(probe_ema).add_(q.detach(), alpha=1 - probe_ema)
        if log and (step % 25 == 0 or step + 1 == iters):
            log.append(step, l_equ.item(), l_id.item(), loss.item())
        if probe_log and (step + 1) % probe_every == 0:
            with torch.no_grad():
                if shadow is None:
                    probe_log.append(step + 1, float(probe_fn(system)))
                else:
                    stash = [q.detach().clone() for q in params]
                    for q, e in zip(params, shadow):
                        q.copy_(e)
                    probe_log.append(step + 1, float(probe_fn(system)))
                    for q, s in zip(params, stash):
                        q.copy_(s)
        if (step + 1) % save_every == 0 and step + 1 < iters:
            save_system(out_path, system, stage, step + 1, extra)

    save_system(out_path, system, stage, iters, extra)
    if log:
        log.close()
    if probe_log:
        probe_log.close()
    return out_path


def _load_ip_init(cfg, init_path, expected, target_stage):
    if not os.path.exists(init_path):
        raise StageError(f"missing checkpoint {init_path}; run the "
                         f"{expected[0]} stage before {target_stage}")
    system, meta = load_system(
        init_path, require=("backbone", "adapters", "branch",
                            "identity_encoder"))
    if meta["stage"] not in expected:
        raise StageError(
            f"{init_path} holds stage {meta['stage']!r}; {target_stage} "
            f"continues from {' or '.join(expected)}")
    check_dims(cfg, meta["config"], init_path)
    return system, meta


def train_stage(cfg: RunConfig, stage: str, manifest_path, out_path, *,
                init=None, connector_init=None, iters=None, seed=None,
                lambda_id=None, use_dense=True, log_dir=None,
                probe_fn=None, probe_every=0, probe_ema=0.0,
                resume=False) -> str:
    """Run one named stage; refuses to start when the prerequisite checkpoint
    is missing or belongs to the wrong stage."""
    if stage not in STAGES:
        raise StageError(f"unknown stage {stage!r}; expected one of {STAGES}")
    seed = cfg.seed if seed is None else int(seed)

    if stage == "pretrain":
        return pretrain(cfg, manifest_path, out_path, seed=seed,
                        log_dir=log_dir, resume=resume)
    if stage == "connector":
        if init is None:
            raise StageError("the connector stage needs the pretrain "
                             "checkpoint; run the pretrain stage first")
        return train_connector(cfg, manifest_path, init, out_path, seed=seed,
                               log_dir=log_dir)

    data = TrainingData(manifest_path)
    if data.image_size != cfg.image_size:
        raise StageError(f"dataset images are {data.image_size}px, "
                         f"config expects {cfg.image_size}px")
    lam = cfg.lambda_id if lambda_id is None else float(lambda_id)

    start_step = 0
    if resume and os.path.exists(out_path):
        system, meta = load_system(out_path)
        if meta["stage"] != stage:
            raise StageError(f"{out_path} holds stage {meta['stage']!r}, "
                             f"cannot resume {stage} from it")
        check_dims(cfg, meta["config"], out_path)
        start_step = meta["step"]
    elif stage == "warmup_1to1":
        if init is None or connector_init is None:
            raise StageError("warmup_1to1 needs the pretrain and connector "
                             "checkpoints; run those stages first")
        system = assemble_control_system(cfg, init, connector_init, seed=seed)
    elif stage == "main_1toMany":
        if init is None:
            raise StageError("main_1toMany needs the warmup_1to1 checkpoint; "
                             "run the warmup_1to1 stage first")
        system, meta = _load_ip_init(cfg, init,
                                     ("warmup_1to1", "main_1toMany"), stage)
        start_step = meta["step"] if meta["stage"] == "main_1toMany" else 0
    else:
        if init is None:
            raise StageError("equivariant needs the main_1toMany checkpoint; "
                             "run the main_1toMany stage first")
        system, _ = _load_ip_init(cfg, init, ("main_1toMany",), stage)

    default_iters = {"warmup_1to1": cfg.iters_warmup,
                     "main_1toMany": cfg.iters_main,
                     "equivariant": cfg.iters_equivariant}[stage]
    total = default_iters if iters is None else int(iters)
    if stage == "main_1toMany" and start_step:
        total = start_step + (default_iters if iters is None else int(iters))
    return _run_ip(system, data, cfg, out_path, stage=stage, seed=seed,
                   iters=total, lambda_id=lam if stage == "equivariant" else 0.0,
                   use_dense=use_dense, log_dir=log_dir,
                   start_step=start_step, probe_fn=probe_fn,
                   probe_every=probe_every, probe_ema=probe_ema)


def make_identity_probe(data: TrainingData, *, n_identities=8, n_prompts=2,
                        n_seeds=12, steps=8, skip_t=None, seed=0):
    """Held-out identity-similarity probe over a fixed sample grid.

    A single generation is a noisy measurement, so the probe averages over
    identities x target scenes x sampling seeds; the grid is frozen at
    construction, which makes consecutive probe values comparable."""
    from .inference import ConditionBundle, sample

    targets = []
    for ident in sorted({r.identity_id for r in data.test})[:n_identities]:
        recs = [r for r in data.test if r.identity_id == ident]
        for j in range(min(n_prompts, len(recs) - 1)):
            targets.append((ident, recs[0], recs[1 + j]))
    if not targets:
        raise StageError("identity probe needs test identities with two scenes")

    @torch.no_grad()
    def probe(system) -> float:
        was_training = {n: m.training for n, m in system.modules().items()}
        for m in system.modules().values():
            m.eval()
        sims = []
        st = (system.cfg.skip_t if skip_t is None else skip_t)
        for ident, ref, tgt in targets:
            prompt = [t for t in tgt.caption if t.startswith("bg:")]
            z_ref = system.identity_encoder.extract_identity(
                torch.from_numpy(data.image(ref)))
            for k in range(n_seeds):
                bundle = ConditionBundle(
                    ref_images=[data.image(ref)], pose_map=data.pose(tgt),
                    prompt=prompt, skip_t=st, steps=steps,
                    seed=seed + 7919 * k + ident)
                out = sample(system, bundle)
                z_gen = system.identity_encoder.extract_identity(
                    torch.from_numpy(out.image))
                sims.append(float((z_gen * z_ref).sum()))
        for n, m in system.modules().items():
            m.train(was_training[n])
        return float(np.mean(sims))

    return probe
