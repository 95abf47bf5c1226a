"""Versioned binary checkpoint container.

Layout: 8-byte magic, u32 little-endian format version, u64 little-endian
header length, UTF-8 JSON header, then raw array bytes. The header carries
run metadata plus a directory of arrays (name, dtype, shape, byte offset,
byte count). Arrays are stored little-endian, C-contiguous, so round trips
are bit exact on any host. A version mismatch raises instead of guessing.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"GLYPHCK1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named numpy arrays plus a JSON-able metadata dict."""
    directory = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        # asarray(order="C") keeps 0-d shapes; ascontiguousarray would not
        arr = np.asarray(arrays[name], order="C")
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        directory.append(
            {
                "name": name,
                "dtype": arr.dtype.str.lstrip("<=|"),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"meta": meta or {}, "arrays": directory}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Read a container; returns (arrays dict, meta dict)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(
                f"{path}: format version {version}, this build reads {VERSION}"
            )
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        body = f.read()
    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        blob = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(blob) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated array {entry['name']!r}")
        arr = np.frombuffer(blob, dtype=dt).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return arrays, header["meta"]


def state_dict_to_arrays(module, prefix: str) -> dict:
    """Flatten a torch module's state_dict under a dotted prefix."""
    out = {}
    for key, tensor in module.state_dict().items():
        out[f"{prefix}.{key}"] = tensor.detach().cpu().numpy()
    return out


def arrays_to_state_dict(arrays: dict, prefix: str) -> dict:
    """Extract tensors for one component prefix from a loaded array dict."""
    import torch

    pre = prefix + "."
    state = {}
    for name, arr in arrays.items():
        if name.startswith(pre):
            state[name[len(pre) :]] = torch.from_numpy(np.array(arr))
    if not state:
        raise CheckpointError(f"no arrays found under prefix {prefix!r}")
    return state


def component_names(arrays: dict) -> list:
    """Top-level component prefixes present in an array dict."""
    return sorted({name.split(".", 1)[0] for name in arrays})


def params_checksum(module) -> str:
    """Order-stable digest of every parameter and buffer byte in a module."""
    import hashlib

    h = hashlib.sha256()
    for key, tensor in sorted(module.state_dict().items()):
        h.update(key.encode("utf-8"))
        h.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return h.hexdigest()
