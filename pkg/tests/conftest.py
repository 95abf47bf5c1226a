"""Shared fixtures: a tiny rendered dataset and a micro training run."""

import numpy as np
import pytest
import torch

from glyphflow.config import default_config
from glyphflow.data_synth import build_dataset

MICRO = dict(
    p=4, image_size=16, depth=2, model_dim=64, heads=4, feature_dim=32,
    m_tokens=4, d=1, l=2, n_blocks=2, batch=4, max_refs=2, steps=4,
    iters_pretrain=40, iters_identity=60, iters_connector=40,
    iters_warmup=10, iters_main=16, iters_equivariant=10,
)


@pytest.fixture(scope="session")
def micro_cfg():
    return default_config(**MICRO)


@pytest.fixture(scope="session")
def micro_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    gen = build_dataset(str(root / "gen"), seed=0, n_train=6, n_test=4,
                        scenes=3, mode="one_to_many", size=16)
    edit = build_dataset(str(root / "edit"), seed=0, n_train=6, n_test=1,
                         scenes=1, mode="editing_triples", size=16,
                         n_triples=40)
    return {"gen": gen, "edit": edit}


@pytest.fixture(scope="session")
def micro_run(micro_cfg, micro_data, tmp_path_factory):
    """Every training stage once, at a profile that runs in seconds."""
    from glyphflow.training import train_stage

    root = tmp_path_factory.mktemp("run")
    logs = str(root / "logs")
    paths = {"logs": logs, "gen": micro_data["gen"], "edit": micro_data["edit"]}
    paths["pretrain"] = train_stage(
        micro_cfg, "pretrain", micro_data["gen"], str(root / "pre.ckpt"),
        log_dir=logs)
    paths["connector"] = train_stage(
        micro_cfg, "connector", micro_data["edit"], str(root / "conn.ckpt"),
        init=paths["pretrain"], log_dir=logs)
    paths["warmup"] = train_stage(
        micro_cfg, "warmup_1to1", micro_data["gen"], str(root / "warm.ckpt"),
        init=paths["pretrain"], connector_init=paths["connector"],
        log_dir=logs)
    paths["main"] = train_stage(
        micro_cfg, "main_1toMany", micro_data["gen"], str(root / "main.ckpt"),
        init=paths["warmup"], log_dir=logs)
    paths["equivariant"] = train_stage(
        micro_cfg, "equivariant", micro_data["gen"], str(root / "equ.ckpt"),
        init=paths["main"], log_dir=logs)
    return paths


@pytest.fixture()
def fd_check():
    """Central-difference gradient checker for double-precision instances."""

    def _check(fn, leaf, rel_tol=1e-4, n_coords=6, h=1e-6):
        loss = fn()
        leaf.grad = None
        loss.backward()
        grad = leaf.grad.detach().clone()
        flat = leaf.detach().view(-1)
        rng = np.random.default_rng(0)
        picks = rng.choice(flat.numel(), size=min(n_coords, flat.numel()),
                           replace=False)
        for i in picks:
            orig = float(flat[i])
            flat[i] = orig + h
            hi = float(fn().detach())
            flat[i] = orig - h
            lo = float(fn().detach())
            flat[i] = orig
            fd = (hi - lo) / (2 * h)
            an = float(grad.view(-1)[i])
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            assert rel <= rel_tol, f"coord {i}: analytic {an} vs fd {fd}"

    return _check


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
