"""Stage orchestration: gating, determinism, loss logs, probes, resume."""

import csv
import os

import numpy as np
import pytest
import torch

from glyphflow.checkpoint import component_names, load_checkpoint
from glyphflow.config import default_config
from glyphflow.pipeline import load_system
from glyphflow.training import (CsvLog, STAGES, StageError, TrainingData,
                                _stage_seed, _step_rng, check_dims,
                                make_identity_probe, train_stage)

from conftest import MICRO


def _read_rows(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def _trained_sum(system):
    mods = system.modules()
    return float(sum(p.detach().sum() for name in ("adapters", "branch")
                     for p in mods[name].parameters()))


# ---------------------------------------------------------------------------
# determinism plumbing


def test_stage_seeds_are_distinct_per_stage():
    seeds = [_stage_seed(5, s) for s in STAGES]
    assert len(set(seeds)) == len(STAGES)
    assert all(a != b for a, b in zip(seeds, (_stage_seed(6, s) for s in STAGES)))


def test_step_rng_repeats_within_a_step_and_differs_across_steps():
    a = _step_rng(3, "main_1toMany", 7).integers(0, 1 << 30, size=4)
    b = _step_rng(3, "main_1toMany", 7).integers(0, 1 << 30, size=4)
    c = _step_rng(3, "main_1toMany", 8).integers(0, 1 << 30, size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_check_dims_rejects_shape_drift(micro_cfg):
    check_dims(micro_cfg, dict(micro_cfg), "ckpt")  # identical shape: fine
    altered = dict(micro_cfg)
    altered["model_dim"] = 999
    with pytest.raises(StageError, match="different shape"):
        check_dims(micro_cfg, altered, "ckpt")


# ---------------------------------------------------------------------------
# data access


def test_training_data_splits_and_grouping(micro_data):
    data = TrainingData(micro_data["gen"])
    assert data.train and data.test
    assert set(data.by_identity) == {r.identity_id for r in data.train}
    img = data.image(data.train[0])
    assert img.dtype == np.float32 and img.shape == (16, 16, 3)
    assert data.image_size == 16
    # cached decode: same object back on the second request
    assert data.image(data.train[0]) is img


def test_editing_pairs_link_source_to_instruction(micro_data):
    data = TrainingData(micro_data["edit"])
    pairs = data.editing_pairs()
    assert len(pairs) == 40
    for src, dst in pairs:
        assert src.identity_id == dst.identity_id
        assert dst.caption[0] == "edit"
        assert tuple(src.caption) != tuple(dst.caption)


# ---------------------------------------------------------------------------
# stage gating


def test_unknown_stage_rejected(micro_cfg, micro_data, tmp_path):
    with pytest.raises(StageError, match="unknown stage"):
        train_stage(micro_cfg, "finetune", micro_data["gen"],
                    str(tmp_path / "x.ckpt"))


def test_connector_stage_requires_pretrain(micro_cfg, micro_data, tmp_path):
    with pytest.raises(StageError, match="pretrain"):
        train_stage(micro_cfg, "connector", micro_data["edit"],
                    str(tmp_path / "x.ckpt"))


def test_warmup_requires_both_prerequisites(micro_cfg, micro_data, tmp_path):
    with pytest.raises(StageError, match="pretrain and connector"):
        train_stage(micro_cfg, "warmup_1to1", micro_data["gen"],
                    str(tmp_path / "x.ckpt"))


def test_main_requires_warmup(micro_cfg, micro_data, tmp_path):
    with pytest.raises(StageError, match="warmup_1to1"):
        train_stage(micro_cfg, "main_1toMany", micro_data["gen"],
                    str(tmp_path / "x.ckpt"))


def test_equivariant_requires_main(micro_cfg, micro_data, tmp_path):
    with pytest.raises(StageError, match="main_1toMany"):
        train_stage(micro_cfg, "equivariant", micro_data["gen"],
                    str(tmp_path / "x.ckpt"))


def test_equivariant_rejects_a_warmup_checkpoint(micro_cfg, micro_data,
                                                 micro_run, tmp_path):
    with pytest.raises(StageError, match="continues from"):
        train_stage(micro_cfg, "equivariant", micro_data["gen"],
                    str(tmp_path / "x.ckpt"), init=micro_run["warmup"])


def test_image_size_mismatch_rejected(micro_data, tmp_path):
    cfg32 = default_config(**{**MICRO, "image_size": 32})
    with pytest.raises(StageError, match="16px"):
        train_stage(cfg32, "main_1toMany", micro_data["gen"],
                    str(tmp_path / "x.ckpt"))


def test_resume_refuses_a_foreign_checkpoint(micro_cfg, micro_data, micro_run):
    with pytest.raises(StageError, match="cannot resume"):
        train_stage(micro_cfg, "main_1toMany", micro_data["gen"],
                    micro_run["pretrain"], resume=True)


# ---------------------------------------------------------------------------
# loss logs


def test_equivariant_log_decomposes_the_total(micro_cfg, micro_run):
    header, rows = _read_rows(os.path.join(micro_run["logs"],
                                           "loss_equivariant.csv"))
    assert header == ["step", "l_equ", "l_id", "l_total"]
    assert rows
    lam = micro_cfg.lambda_id
    for step, l_equ, l_id, l_total in rows:
        assert float(l_total) == pytest.approx(
            float(l_equ) + lam * float(l_id), abs=1e-6)
    assert any(float(r[2]) > 0 for r in rows)


def test_main_stage_logs_zero_identity_term(micro_run):
    _, rows = _read_rows(os.path.join(micro_run["logs"],
                                      "loss_main_1toMany.csv"))
    assert rows
    for _, l_equ, l_id, l_total in rows:
        assert float(l_id) == 0.0
        assert l_total == l_equ


def test_pretrain_writes_semantic_head_log(micro_run):
    header, rows = _read_rows(os.path.join(micro_run["logs"],
                                           "loss_semantic.csv"))
    assert header == ["step", "cross_entropy", "accuracy"]
    assert all(0.0 <= float(r[2]) <= 1.0 for r in rows)
    assert os.path.exists(os.path.join(micro_run["logs"], "loss_pretrain.csv"))


def test_csv_log_truncates_unless_appending(tmp_path):
    path = str(tmp_path / "log.csv")
    log = CsvLog(path, ("step", "v"))
    log.append(0, 1.0)
    log.close()
    CsvLog(path, ("step", "v")).close()  # fresh open wipes stale rows
    assert _read_rows(path) == (["step", "v"], [])
    log = CsvLog(path, ("step", "v"), append=True)
    log.append(3, 0.5)
    log.close()
    log = CsvLog(path, ("step", "v"), append=True)
    log.append(4, 0.25)
    log.close()
    assert _read_rows(path) == (["step", "v"], [["3", "0.5"], ["4", "0.25"]])


def test_rerun_replaces_the_stage_log(micro_cfg, micro_data, micro_run,
                                      tmp_path):
    logs = str(tmp_path / "logs")
    for _ in range(2):
        train_stage(micro_cfg, "warmup_1to1", micro_data["gen"],
                    str(tmp_path / "w.ckpt"), init=micro_run["pretrain"],
                    connector_init=micro_run["connector"], iters=6,
                    log_dir=logs)
    _, rows = _read_rows(os.path.join(logs, "loss_warmup_1to1.csv"))
    assert [r[0] for r in rows] == ["0", "5"]


# ---------------------------------------------------------------------------
# connector isolation


def test_connector_trains_alone_and_freezes_semantics(micro_run):
    arrays, meta = load_checkpoint(micro_run["connector"])
    assert component_names(arrays) == ["connector", "instruction_encoder",
                                       "semantic_encoder"]
    assert meta["stage"] == "connector"
    pre_arrays, _ = load_checkpoint(micro_run["pretrain"])
    sem_keys = [k for k in arrays if k.startswith("semantic_encoder.")]
    assert sem_keys
    for k in sem_keys:
        assert np.array_equal(arrays[k], pre_arrays[k])

    _, rows = _read_rows(os.path.join(micro_run["logs"], "loss_connector.csv"))
    losses = [float(r[1]) for r in rows]
    assert losses[-1] < losses[0]


# ---------------------------------------------------------------------------
# resume and checkpoint metadata


def test_resume_extends_steps_and_appends_to_the_log(micro_cfg, micro_data,
                                                     micro_run, tmp_path):
    out = str(tmp_path / "main.ckpt")
    logs = str(tmp_path / "logs")
    train_stage(micro_cfg, "main_1toMany", micro_data["gen"], out,
                init=micro_run["warmup"], iters=4, log_dir=logs)
    assert load_checkpoint(out)[1]["step"] == 4
    train_stage(micro_cfg, "main_1toMany", micro_data["gen"], out,
                resume=True, iters=4, log_dir=logs)
    assert load_checkpoint(out)[1]["step"] == 8
    header, rows = _read_rows(os.path.join(logs, "loss_main_1toMany.csv"))
    assert header == ["step", "l_equ", "l_id", "l_total"]
    assert [r[0] for r in rows] == ["0", "3", "7"]


def test_stage_metadata_records_the_reference_treatment(micro_cfg, micro_run):
    _, warm = load_checkpoint(micro_run["warmup"])
    assert (warm["stage"], warm["step"]) == ("warmup_1to1", 10)
    assert warm["ref_mode"] == "clean" and warm["lambda_id"] == 0.0
    _, equ = load_checkpoint(micro_run["equivariant"])
    assert (equ["stage"], equ["step"]) == ("equivariant", 10)
    assert equ["ref_mode"] == "noised"
    assert equ["lambda_id"] == micro_cfg.lambda_id
    assert equ["config"]["model_dim"] == micro_cfg.model_dim


# ---------------------------------------------------------------------------
# probes


def test_probe_reads_averaged_weights_and_restores_live_ones(
        micro_cfg, micro_data, micro_run, tmp_path):
    # with an averaging factor of 1.0 the shadow weights never leave their
    # initial values, so every probe must see the init even while the live
    # weights train away from it
    out = str(tmp_path / "equ.ckpt")
    logs = str(tmp_path / "logs")
    init_system, _ = load_system(micro_run["main"])
    expected = _trained_sum(init_system)
    train_stage(micro_cfg, "equivariant", micro_data["gen"], out,
                init=micro_run["main"], iters=4, log_dir=logs,
                probe_fn=_trained_sum, probe_every=2, probe_ema=1.0)
    header, rows = _read_rows(os.path.join(logs, "probe_equivariant.csv"))
    assert header == ["step", "id_sim"]
    assert [r[0] for r in rows] == ["2", "4"]
    for _, value in rows:
        assert float(value) == pytest.approx(expected, rel=1e-6)
    final_system, _ = load_system(out)
    assert abs(_trained_sum(final_system) - expected) > 1e-5


def test_identity_probe_is_frozen_and_repeatable(micro_data, micro_run):
    data = TrainingData(micro_data["gen"])
    probe = make_identity_probe(data, n_identities=2, n_prompts=1,
                                n_seeds=1, steps=2)
    system, _ = load_system(micro_run["equivariant"])
    first = probe(system)
    assert -1.0 <= first <= 1.0
    assert probe(system) == first
    assert all(m.training for m in system.modules().values()) is False


def test_identity_probe_needs_two_scene_test_identities(micro_data):
    data = TrainingData(micro_data["edit"])
    with pytest.raises(StageError, match="two scenes"):
        make_identity_probe(data)
