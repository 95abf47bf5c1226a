"""Config parsing, defaults, validation, hashing, run-dir resolution."""

import pytest

from glyphflow.config import (
    RUN_DIR_ENV,
    ConfigError,
    RunConfig,
    default_config,
    load_config,
)


def test_empty_file_yields_documented_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    cfg = load_config(path)
    assert cfg.d == 4
    assert cfg.l == 8
    assert cfg.n_blocks == 4
    assert cfg.lambda_id == 0.2
    assert cfg.skip_t == 0.5
    assert cfg.steps == 28
    assert cfg.p == 8


def test_comments_and_blank_lines_ignored(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# a comment\n\nsteps = 12  # trailing\n   \nalpha=0.5\n")
    cfg = load_config(path)
    assert cfg.steps == 12
    assert cfg.alpha == 0.5


def test_duplicate_key_rejected(tmp_path):
    path = tmp_path / "dup.cfg"
    path.write_text("steps = 5\nsteps = 6\n")
    with pytest.raises(ConfigError, match="duplicate"):
        load_config(path)


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("warp_factor = 9\n")
    with pytest.raises(ConfigError, match="unknown"):
        load_config(path)


def test_type_errors_rejected(tmp_path):
    path = tmp_path / "typed.cfg"
    path.write_text("steps = 3.5\n")
    with pytest.raises(ConfigError, match="expected int"):
        load_config(path)
    path.write_text("alpha = soft\n")
    with pytest.raises(ConfigError, match="expected float"):
        load_config(path)


def test_missing_equals_rejected(tmp_path):
    path = tmp_path / "noeq.cfg"
    path.write_text("steps 9\n")
    with pytest.raises(ConfigError, match="key = value"):
        load_config(path)


def test_int_literal_promoted_for_float_keys():
    cfg = default_config(alpha=2)
    assert cfg.alpha == 2.0
    assert isinstance(cfg.alpha, float)


def test_default_config_rejects_unknown_override():
    with pytest.raises(ConfigError):
        default_config(not_a_key=1)


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("steps = 12\n")
    cfg = load_config(path, steps=3)
    assert cfg.steps == 3


def test_hash_stable_and_sensitive():
    a = default_config()
    b = default_config()
    c = default_config(steps=29)
    assert a.hash == b.hash
    assert a.hash != c.hash
    assert len(a.hash) == 12


def test_attribute_access_mirrors_mapping():
    cfg = default_config(batch=3)
    assert cfg["batch"] == cfg.batch == 3
    with pytest.raises(AttributeError):
        cfg.nonexistent


def test_run_dir_env_overrides(monkeypatch):
    cfg = default_config(run_dir="somewhere")
    monkeypatch.delenv(RUN_DIR_ENV, raising=False)
    assert cfg.resolved_run_dir() == "somewhere"
    monkeypatch.setenv(RUN_DIR_ENV, "/elsewhere")
    assert cfg.resolved_run_dir() == "/elsewhere"


def test_runconfig_is_a_plain_mapping():
    cfg = RunConfig({"steps": 2})
    assert dict(cfg) == {"steps": 2}
