"""Flat run configuration with documented defaults and a stable hash.

Config files are plain text, one `key = value` per line, `#` comments.
Unknown keys, duplicate keys, and type errors are rejected. CLI flags mirror
keys as --kebab-case. The config hash is a sha256 over the canonicalized
resolved key=value listing, so identical file bytes always hash identically.
"""

from __future__ import annotations

import hashlib
import os

RUN_DIR_ENV = "REMIX_RUN_DIR"

# key -> (type, default, help)
SCHEMA = {
    "p": (int, 8, "codec patch size; latent channels are 3*p^2"),
    "image_size": (int, 64, "rendered image side length"),
    "depth": (int, 8, "backbone block count"),
    "model_dim": (int, 256, "backbone token width"),
    "heads": (int, 8, "attention heads"),
    "feature_dim": (int, 128, "text/semantic feature width D"),
    "m_tokens": (int, 16, "semantic feature token count M"),
    "d": (int, 4, "connector joint-attention block count"),
    "l": (int, 8, "connector cross-attention layer count"),
    "n_blocks": (int, 4, "control branch block count N"),
    "alpha": (float, 1.0, "dense injection strength"),
    "beta": (float, 1.0, "sparse injection strength"),
    "lambda_id": (float, 0.2, "identity loss weight"),
    "skip_t": (float, 0.5, "reference skip-ahead intensity coefficient"),
    "steps": (int, 28, "sampler Euler steps"),
    "seed": (int, 0, "global seed"),
    "lr": (float, 1e-4, "optimizer learning rate"),
    "batch": (int, 8, "training batch size"),
    "iters_pretrain": (int, 20000, "pretrain stage iterations"),
    "iters_connector": (int, 5000, "connector stage iterations"),
    "iters_warmup": (int, 1000, "one-to-one warmup iterations"),
    "iters_main": (int, 6000, "one-to-many main iterations"),
    "iters_equivariant": (int, 1000, "shared-noise stage iterations"),
    "iters_identity": (int, 2000, "identity classifier iterations"),
    "max_refs": (int, 4, "max reference segments per sample"),
    "run_dir": (str, "runs", "output root (REMIX_RUN_DIR env overrides)"),
    "data_dir": (str, "data", "dataset root"),
}


class ConfigError(ValueError):
    pass


class RunConfig(dict):
    """Validated flat config; attribute access for convenience."""

    def __getattr__(self, key):
        try:
            return self[key]
        except KeyError as e:
            raise AttributeError(key) from e

    @property
    def hash(self) -> str:
        lines = "\n".join(f"{k}={self[k]!r}" for k in sorted(self))
        return hashlib.sha256(lines.encode("utf-8")).hexdigest()[:12]

    def resolved_run_dir(self) -> str:
        return os.environ.get(RUN_DIR_ENV, self["run_dir"])


def _coerce(key: str, raw: str):
    typ, _, _ = SCHEMA[key]
    raw = raw.strip()
    try:
        if typ is int:
            # forbid silent float truncation
            if any(c in raw for c in ".eE") and not raw.lstrip("+-").isdigit():
                raise ValueError
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(
            f"config key {key!r}: expected {typ.__name__}, got {raw!r}"
        ) from None


def default_config(**overrides) -> RunConfig:
    cfg = RunConfig({k: v for k, (_, v, _) in SCHEMA.items()})
    for k, v in overrides.items():
        if k not in SCHEMA:
            raise ConfigError(f"unknown config key {k!r}")
        typ = SCHEMA[k][0]
        if typ is float and isinstance(v, int):
            v = float(v)
        if not isinstance(v, typ):
            raise ConfigError(f"config key {k!r}: expected {typ.__name__}, got {v!r}")
        cfg[k] = v
    return cfg


def load_config(path, **overrides) -> RunConfig:
    """Parse, validate, and default a config file; returns a RunConfig."""
    seen: dict[str, object] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            if key in seen:
                raise ConfigError(f"{path}:{lineno}: duplicate config key {key!r}")
            seen[key] = _coerce(key, raw)
    seen.update(overrides)
    return default_config(**seen)
