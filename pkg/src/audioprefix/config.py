"""Run configuration: a JSON document with one object per module section,
flag overrides on dot-paths, and a recorded hash tying artifacts to the
exact configuration that produced them."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import ConfigError

DEFAULTS: dict = {
    "data": {
        "train_manifests": [],
        "val_manifest": "",
        "test_manifest": "",
        "min_freq": 1,
        "max_text_len": 32,
    },
    "audio": {
        "sample_rate": 32000,
        "window_size": 1024,
        "hop_size": 640,
        "n_mels": 64,
        "fmin": 50.0,
        "fmax": 14000.0,
        "log_offset": 1e-10,
    },
    "encoder": {
        "n_blocks": 6,
        "base_channels": 64,
        "channels": 2048,
        "time_downsample": 64,
        "trainable": True,
        "pretrained": "",
    },
    "mapper": {
        "n_temporal_prefixes": 15,
        "n_global_prefixes": 11,
        "d_model": 768,
        "n_layers": 4,
        "n_heads": 8,
        "use_positional_encoding": True,
        "use_temporal": True,
        "use_global": True,
        "use_mapper": True,
    },
    "decoder": {
        "d_model": 768,
        "n_layers": 12,
        "n_heads": 12,
        "max_positions": 1024,
        "weights": "",
        "vocab": "",
        "fixture_pretrain_steps": 300,
    },
    "trainer": {
        "setup": "i",
        "profile": "toy",
        "batch_size": 0,          # 0: take the profile default
        "weight_decay": -1.0,     # <0: take the profile default
        "audio_seconds": 0.0,     # 0: take the profile default
        "peak_lr": 5e-5,
        "warmup_steps": -1,       # <0: 5% of total steps
        "max_epochs": 50,
        "max_steps": 0,           # 0: no cap
        "patience": 5,
        "seed": 0,
        "grad_clip": 1.0,
        "decay": "linear",
    },
    "generation": {
        "strategy": "greedy",
        "beam_width": 5,
        "max_len": 30,
    },
    "retrieval": {
        "embedder": "fallback",
        "k_values": [1, 5, 10],
    },
    "paths": {
        "out_dir": "runs/default",
    },
}


def _check_keys(doc: dict, path: str = "") -> None:
    ref = DEFAULTS
    for section, content in doc.items():
        if section not in ref:
            raise ConfigError(section, "unknown section")
        if not isinstance(content, dict):
            raise ConfigError(section, "section must be an object")
        for key, value in content.items():
            if key not in ref[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            default = ref[section][key]
            if isinstance(default, bool):
                ok = isinstance(value, bool)
            elif isinstance(default, float):
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            elif isinstance(default, int):
                ok = isinstance(value, int) and not isinstance(value, bool)
            elif isinstance(default, list):
                ok = isinstance(value, list)
            else:
                ok = isinstance(value, str)
            if not ok:
                raise ConfigError(f"{section}.{key}",
                                  f"expected {type(default).__name__}, "
                                  f"got {type(value).__name__}")


def load_config(path, overrides: list[str] | None = None) -> dict:
    """Load, validate and merge a config file with dot-path overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(str(path), "config file not found")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"invalid JSON: {exc}") from exc
        _check_keys(doc)
        for section, content in doc.items():
            cfg[section].update(content)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2:
            raise ConfigError(dotted, "override path must be section.key")
        section, key = parts
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(dotted, "unknown key")
        default = DEFAULTS[section][key]
        try:
            if isinstance(default, bool):
                value = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                value = int(raw)
            elif isinstance(default, float):
                value = float(raw)
            elif isinstance(default, list):
                value = json.loads(raw)
            else:
                value = raw
        except (ValueError, json.JSONDecodeError) as exc:
            raise ConfigError(dotted, f"cannot parse value {raw!r}") from exc
        cfg[section][key] = value
    return cfg


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
