"""Run configuration: defaults, config-file parsing, digests, seed fan-out.

One global seed drives the whole pipeline. Per-stage seeds derive from it by
hashing the stage name (and any qualifiers such as the fold's source id)
together with the global seed: derive_seed(seed, "stage", ...) — so stages
stay independent while the run remains reproducible from a single knob.
The environment variable LOGMETA_CONFIG may name a default config file; it
is consulted only when --config is not given.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, fields

CONFIG_ENV_VAR = "LOGMETA_CONFIG"


@dataclass
class RunConfig:
    manifest: str = ""
    out_dir: str = "runs"
    embed_dim: int = 768
    external_path: str | None = None
    k: int = 200
    tau: float = 0.8
    smote_k: int = 5
    focal_gamma: float = 2.0
    focal_alpha: object = "balanced"  # "balanced" or a float
    split_ratio: float = 0.7
    seed: int = 0
    inner_steps: int = 5
    inner_lr: float = 0.01
    outer_lr: float = 1e-3
    meta_batch: int = 4
    episodes_per_phase: tuple = (120, 120, 160)

    def echo(self) -> dict:
        """Canonical flat mapping of every field, for metadata and digests."""
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, float):
                out[f.name] = f"{value:.17g}"
            elif isinstance(value, tuple):
                out[f.name] = ",".join(str(v) for v in value)
            else:
                out[f.name] = "" if value is None else str(value)
        return out


def config_digest(cfg: RunConfig) -> str:
    """Stable 16-hex-char digest of the canonicalized config."""
    text = "\n".join(f"{k}={v}" for k, v in sorted(cfg.echo().items()))
    return hashlib.blake2b(text.encode("utf-8"), digest_size=8).hexdigest()


def derive_seed(*parts) -> int:
    """Mix a global seed with stage-name qualifiers into a 63-bit seed."""
    text = "/".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


# config file section -> (key -> RunConfig field)
_SECTIONS = {
    "run": {"manifest": "manifest", "out_dir": "out_dir", "seed": "seed"},
    "ingest": {"split_ratio": "split_ratio"},
    "embedding": {"dim": "embed_dim", "external": "external_path"},
    "label": {"tau": "tau"},
    "select": {"k": "k"},
    "balance": {"smote_k": "smote_k"},
    "focal": {"gamma": "focal_gamma", "alpha": "focal_alpha"},
    "meta": {
        "inner_steps": "inner_steps",
        "inner_lr": "inner_lr",
        "outer_lr": "outer_lr",
        "meta_batch": "meta_batch",
        "episodes_per_phase": "episodes_per_phase",
    },
}

_INT_FIELDS = {"embed_dim", "k", "smote_k", "seed", "inner_steps", "meta_batch"}
_FLOAT_FIELDS = {"tau", "focal_gamma", "split_ratio", "inner_lr", "outer_lr"}


def _coerce(field_name: str, raw: str):
    raw = raw.strip()
    if field_name in _INT_FIELDS:
        return int(raw)
    if field_name in _FLOAT_FIELDS:
        return float(raw)
    if field_name == "episodes_per_phase":
        parts = [int(p) for p in raw.replace("/", ",").split(",")]
        if len(parts) != 3:
            raise ValueError("episodes_per_phase needs exactly 3 counts")
        return tuple(parts)
    if field_name == "focal_alpha":
        return raw if raw == "balanced" else float(raw)
    if field_name == "external_path":
        return raw or None
    return raw


def load_config(path=None) -> RunConfig:
    """Read a config file into a RunConfig; unknown keys are errors.

    When path is None, LOGMETA_CONFIG is consulted; when that is unset too,
    pure defaults are returned.
    """
    cfg = RunConfig()
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(f"config file not readable: {path}")
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        mapping = _SECTIONS[section]
        for key, raw in parser[section].items():
            if key not in mapping:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            setattr(cfg, mapping[key], _coerce(mapping[key], raw))
    return cfg


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Apply non-None keyword overrides (CLI flags beat the config file).

    String values for typed fields are coerced the same way config-file
    values are.
    """
    typed = _INT_FIELDS | _FLOAT_FIELDS | {"episodes_per_phase", "focal_alpha",
                                           "external_path"}
    for name, value in overrides.items():
        if value is None:
            continue
        if not hasattr(cfg, name):
            raise ValueError(f"unknown config field {name!r}")
        if isinstance(value, str) and name in typed:
            value = _coerce(name, value)
        setattr(cfg, name, value)
    return cfg
