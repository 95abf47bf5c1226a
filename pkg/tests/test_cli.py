"""Command-line behavior: exit codes, artifact locations, self-checks."""

import os
import shutil
import subprocess
import sys

import pytest

from glyphflow.cli import _parse_ckpt_specs, main
from glyphflow.training import TrainingData


# ---------------------------------------------------------------------------
# exit codes


def test_unknown_flag_is_a_usage_error():
    with pytest.raises(SystemExit) as ex:
        main(["sample", "--bogus-flag", "1"])
    assert ex.value.code == 2


def test_missing_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as ex:
        main([])
    assert ex.value.code == 2


def test_unknown_ablation_axis_is_a_usage_error(micro_data, tmp_path, capsys):
    code = main(["ablate", "--data", micro_data["gen"],
                 "--edit-data", micro_data["edit"],
                 "--out", str(tmp_path), "--axes", "nonsense"])
    assert code == 2
    assert "unknown ablation axes" in capsys.readouterr().err


def test_missing_prerequisite_is_a_runtime_failure(micro_data, tmp_path,
                                                   capsys):
    code = main(["train-ipcn", "--data", micro_data["gen"],
                 "--stage", "equivariant",
                 "--init", str(tmp_path / "nope.ckpt"),
                 "--out", str(tmp_path / "out.ckpt")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# verify


def test_verify_reports_every_check(capsys):
    assert main(["verify"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    names = {ln.split()[1] for ln in lines[:-1]}
    assert all(ln.startswith("PASS") for ln in lines[:-1])
    assert names == {"codec_round_trip", "zero_init_noop", "gradient_check",
                     "loss_identities", "positions_disjoint",
                     "skip_ahead_endpoints"}
    assert lines[-1] == "6/6 checks passed"


def test_console_script_is_installed_and_verifies():
    exe = shutil.which("glyphflow")
    assert exe, "console script missing from PATH"
    proc = subprocess.run([exe, "verify"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "6/6 checks passed" in proc.stdout


# ---------------------------------------------------------------------------
# data and sampling round trips


def test_synth_data_writes_a_manifest(tmp_path, capsys):
    out = str(tmp_path / "ds")
    code = main(["synth-data", "--out", out, "--mode", "one_to_one",
                 "--n-train", "4", "--n-test", "2", "--scenes", "1",
                 "--image-size", "16"])
    assert code == 0
    manifest = capsys.readouterr().out.strip()
    assert manifest == os.path.join(out, "manifest.tsv")
    assert os.path.exists(manifest)
    assert os.path.exists(os.path.join(out, "vocab.txt"))


def test_sample_writes_named_outputs(micro_data, micro_run, tmp_path, capsys):
    rec = TrainingData(micro_data["gen"]).records[0]
    out = str(tmp_path / "s")
    code = main(["sample", "--ckpt", micro_run["equivariant"],
                 "--refs", rec.image_path, "--pose", rec.pose_path,
                 "--prompt", "bg:white", "--steps", "2", "--seed", "3",
                 "--out", out])
    assert code == 0
    printed = capsys.readouterr().out.split()
    assert sorted(os.path.basename(p) for p in printed) == [
        "generated.png", "meta.txt", "recon_00.png"]
    for p in printed:
        assert os.path.getsize(p) > 0


def test_run_dir_env_var_redirects_artifacts(micro_data, micro_run, tmp_path,
                                             monkeypatch, capsys):
    monkeypatch.setenv("REMIX_RUN_DIR", str(tmp_path))
    rec = TrainingData(micro_data["gen"]).records[0]
    code = main(["sample", "--ckpt", micro_run["equivariant"],
                 "--refs", rec.image_path, "--steps", "2"])
    assert code == 0
    printed = capsys.readouterr().out.split()
    assert printed
    for p in printed:
        assert p.startswith(str(tmp_path) + os.sep)
    # default layout is <run dir>/<config hash>/sample_seed<seed>/
    rel = os.path.relpath(printed[0], str(tmp_path)).split(os.sep)
    assert len(rel[0]) == 12 and rel[1] == "sample_seed0"


def test_evaluate_renders_a_table(micro_data, micro_run, tmp_path, capsys):
    out = str(tmp_path / "eval")
    code = main(["evaluate", "--ckpt", f"trained={micro_run['equivariant']}",
                 "--data", micro_data["gen"], "--out", out,
                 "--n-identities", "1", "--n-prompts", "1", "--n-seeds", "1",
                 "--eval-steps", "2"])
    assert code == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0].split() == [
        "variant", "id_sim", "img_sim", "instr_sim", "n_samples", "seed_set"]
    assert "trained" in text
    assert os.path.exists(os.path.join(out, "benchmark.csv"))


def test_checkpoint_specs_accept_names_and_bare_paths():
    specs = _parse_ckpt_specs(["a=/x/a.ckpt", "/y/equivariant.ckpt"])
    assert specs == {"a": "/x/a.ckpt", "equivariant": "/y/equivariant.ckpt"}


def test_sample_without_prompt_or_instruction_fails_cleanly(
        micro_run, tmp_path, capsys):
    code = main(["sample", "--ckpt", micro_run["equivariant"],
                 "--out", str(tmp_path / "s")])
    assert code == 1
    assert "error:" in capsys.readouterr().err
