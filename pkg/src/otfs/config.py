"""Flat run configuration: defaults <- ``key = value`` file <- command-line flags.

Every key has a typed default; unknown keys are rejected wherever they come
from.  The master seed resolves as ``--seed`` > config file > ``OTFS_SEED``
environment variable > default.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

from .errors import ConfigError

SEED_ENV = "OTFS_SEED"

DEFAULTS: dict[str, object] = {
    "seed": 0,
    # sinkhorn
    "epsilon": 0.05,
    "tol": 1e-6,
    "max_iter": 1000,
    # synthetic data
    "classes": 10,
    "dim": 16,
    "separation": 4.0,
    "within_std": 1.0,
    "bias_shift": 0.0,
    "samples": 100,
    # episodes
    "ways": 5,
    "shots": 1,
    "queries": 15,
    "episodes": 600,
    "opta": 1,
    "classifier": "logreg",
    "normalize": True,
    "barycentric": True,
    # memory
    "variant": "full",
    "capacity": 256,
    "partitions": 10,
    "k": 3,
    "epoch_thr": 10,
    "prototype_ema": 0.9,
    "batches": 200,
    # pretraining
    "epochs": 50,
    "batch": 32,
    "lr": 0.5,
    "momentum": 0.99,
    "mask": 0.3,
    "noise": 0.5,
    "out_dim": 16,
    "lambda": 0.1,
    "tau": 2.0,
    # ablation
    "axis": "variant",
    "values": "",
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(key: str, raw) -> object:
    """Convert ``raw`` to the type of ``DEFAULTS[key]``."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = type(DEFAULTS[key])
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind.__name__})") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{n}: unknown config key {key!r}")
        out[key] = coerce(key, value)
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return parse_config_text(text, str(path))


def resolve(file_values: dict | None = None, flags: dict | None = None, env=None) -> dict:
    """Merge defaults, file values and flags (``None`` flags are ignored)."""
    env = os.environ if env is None else env
    cfg = dict(DEFAULTS)
    file_values = file_values or {}
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    if "seed" not in flags and "seed" not in file_values and env.get(SEED_ENV, "").strip():
        cfg["seed"] = coerce("seed", env[SEED_ENV])
    for source in (file_values, flags):
        for key, value in source.items():
            cfg[key] = coerce(key, value)
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
