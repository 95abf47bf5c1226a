"""Binary checkpoint container: bit-exact round trips and hard failures."""

import struct

import numpy as np
import pytest
import torch

from glyphflow.checkpoint import (
    MAGIC,
    VERSION,
    CheckpointError,
    arrays_to_state_dict,
    component_names,
    load_checkpoint,
    params_checksum,
    save_checkpoint,
    state_dict_to_arrays,
)


def test_round_trip_bit_exact_across_dtypes(tmp_path):
    path = tmp_path / "a.ckpt"
    rng = np.random.default_rng(0)
    arrays = {
        "w.f32": rng.standard_normal((3, 5)).astype(np.float32),
        "w.f64": rng.standard_normal((2, 2, 2)),
        "w.i64": rng.integers(-(2**40), 2**40, size=7),
        "w.u8": rng.integers(0, 256, size=(4, 4), dtype=np.uint8),
        "w.scalar": np.float32(1.5).reshape(()),
        "w.empty": np.zeros((0, 3), dtype=np.float32),
    }
    save_checkpoint(path, arrays, {"stage": "test", "step": 9})
    loaded, meta = load_checkpoint(path)
    assert meta == {"stage": "test", "step": 9}
    assert set(loaded) == set(arrays)
    for name, arr in arrays.items():
        assert loaded[name].dtype == arr.dtype, name
        assert loaded[name].shape == arr.shape, name
        assert np.array_equal(loaded[name], arr), name


def test_meta_defaults_to_empty_dict(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"x": np.arange(3)})
    _, meta = load_checkpoint(path)
    assert meta == {}


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTAMAGI" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_version_mismatch_rejected(tmp_path):
    path = tmp_path / "v.ckpt"
    save_checkpoint(path, {"x": np.arange(2)})
    raw = bytearray(path.read_bytes())
    raw[8:12] = struct.pack("<I", VERSION + 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_truncated_body_rejected(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"x": np.arange(100, dtype=np.float64)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_header_is_json_after_fixed_preamble(tmp_path):
    path = tmp_path / "h.ckpt"
    save_checkpoint(path, {"x": np.arange(2)}, {"k": "v"})
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    (version,) = struct.unpack("<I", raw[8:12])
    assert version == VERSION
    (hlen,) = struct.unpack("<Q", raw[12:20])
    import json

    header = json.loads(raw[20 : 20 + hlen])
    assert header["meta"] == {"k": "v"}
    assert header["arrays"][0]["name"] == "x"


def test_module_state_round_trip(tmp_path):
    torch.manual_seed(3)
    lin = torch.nn.Linear(4, 6)
    arrays = state_dict_to_arrays(lin, "head")
    path = tmp_path / "mod.ckpt"
    save_checkpoint(path, arrays)
    loaded, _ = load_checkpoint(path)
    state = arrays_to_state_dict(loaded, "head")
    fresh = torch.nn.Linear(4, 6)
    fresh.load_state_dict(state)
    assert torch.equal(fresh.weight, lin.weight)
    assert torch.equal(fresh.bias, lin.bias)


def test_arrays_to_state_dict_requires_prefix_match():
    with pytest.raises(CheckpointError, match="prefix"):
        arrays_to_state_dict({"other.w": np.zeros(2)}, "head")


def test_component_names_lists_prefixes():
    arrays = {"backbone.a.w": 0, "backbone.b": 0, "connector.x": 0}
    assert component_names(arrays) == ["backbone", "connector"]


def test_params_checksum_stable_and_sensitive():
    torch.manual_seed(5)
    a = torch.nn.Linear(3, 3)
    before = params_checksum(a)
    assert params_checksum(a) == before
    with torch.no_grad():
        a.weight[0, 0] += 1.0
    assert params_checksum(a) != before
