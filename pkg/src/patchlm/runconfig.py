"""Declarative run configuration: one document drives every command.

Unknown keys are rejected (typos should fail loudly), CLI flags override file
values, and the fully resolved config plus its content hash are written into
every run directory so artifacts are traceable.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path


class ConfigError(Exception):
    pass


DEFAULTS: dict = {
    "run": {"seed": 0, "run_root": None, "name": None},
    "rng_algo": "pcg64",
    "data": {
        "train_path": None,
        "eval_path": None,
        "format": "plain-text",
        "synthetic_bytes": 0,  # generate a corpus when no path is given
        "synthetic_doc_bytes": 512,
        "eval_fraction": 0.05,
    },
    "model": {
        "enc_dim": 64,
        "global_dim": 128,
        "dec_dim": 64,
        "enc_layers": 1,
        "global_layers": 4,
        "dec_layers": 2,
        "enc_heads": 4,
        "global_heads": 4,
        "dec_heads": 4,
        "enc_window": 512,
        "dec_window": 512,
        "ff_mult": 4,
        "ff_multiple_of": 8,
        "rope_theta": 500000.0,
        "ngram_sizes": [3, 4, 5, 6, 7, 8],
        "hash_vocab": 4096,
        "hash_prime": 1000000007,
        "max_patch_size": 512,
        "pooling": "max",
    },
    "patching": {
        "scheme": "entropy_global",
        "k": 4,
        "theta_g": None,
        "theta_r": None,
        "theta_g_inference": None,
        "theta_r_inference": None,
        "reset_on_newline": False,
        "max_patch_size": 512,
        "target_patch_size": None,  # when set, calibrate theta before training
    },
    "entropy_model": {"order": 3, "alpha": 0.01, "path": None},
    "optimizer": {
        "lr_peak": 4e-4,
        "warmup_steps": 2000,
        "schedule": "cosine_to_zero",
        "beta1": 0.9,
        "beta2": 0.95,
        "eps": 1e-8,
        "weight_decay": 0.1,
        "grad_clip": 1.0,
    },
    "training": {
        "steps": 1000,
        "patch_budget": 128,
        "eval_every": 0,
        "checkpoint_every": 0,
        "eval_stream_bytes": 4096,
    },
}


def _strip_meta(values: dict) -> dict:
    """Drop underscore-prefixed keys (hash annotations written by `write`)."""
    return {k: (_strip_meta(v) if isinstance(v, dict) else v)
            for k, v in values.items() if not k.startswith("_")}


def _check_keys(given: dict, allowed: dict, path: str = "") -> None:
    for key, val in given.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(allowed[key], dict) and isinstance(val, dict):
            _check_keys(val, allowed[key], path + key + ".")


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


class RunConfig:
    def __init__(self, values: dict):
        _check_keys(values, DEFAULTS)
        self.values = _deep_merge(DEFAULTS, values)
        if self.values["rng_algo"] != "pcg64":
            raise ConfigError(f"unsupported rng_algo {self.values['rng_algo']!r}; this build pins pcg64")

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None) -> "RunConfig":
        values: dict = {}
        if path:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            try:
                values = json.loads(p.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
            if not isinstance(values, dict):
                raise ConfigError("config root must be a JSON object")
            values = _strip_meta(values)
        if overrides:
            _check_keys(overrides, DEFAULTS)
            values = _deep_merge(values, overrides)
        return cls(values)

    def __getitem__(self, key: str):
        return self.values[key]

    def canonical_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"))

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def write(self, path: str | Path) -> None:
        doc = dict(self.values)
        doc["_content_hash"] = self.content_hash
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
