"""Job configuration files (JSON, flat dotted keys or nested sections)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .lora import MotionTrainConfig
from .matching import EditRunConfig
from .sarp import SarpConfig

# config key -> (section, attribute)
KEYS = {
    "thr": ("edit", "thr"),
    "beta1": ("edit", "beta1"),
    "beta2": ("edit", "beta2"),
    "downscale_cutoff": ("edit", "downscale_cutoff"),
    "preset": ("edit", "preset"),
    "steps": ("edit", "steps"),
    "seed": ("job", "seed"),
    "spatial_matching": ("edit", "spatial_matching"),
    "temporal_matching": ("edit", "temporal_matching"),
    "head_average": ("edit", "head_average"),
    "clip_length": ("job", "clip_length"),
    "skip_interval": ("job", "skip_interval"),
    "save_traces": ("job", "save_traces"),
    "sigma_cond": ("job", "sigma_cond"),
    "sarp.alpha": ("sarp", "alpha"),
    "sarp.threshold": ("sarp", "gradient_threshold"),
    "sarp.mode": ("sarp", "mode"),
    "sarp.latent_alpha": ("sarp", "latent_alpha"),
    "lora.rank": ("lora", "rank"),
    "lora.steps": ("lora", "steps"),
    "lora.lr": ("lora", "lr"),
    "lora.optimizer": ("lora", "optimizer"),
    "lora.batch": ("lora", "batch"),
    "lora.scale": ("lora", "scale"),
}


class ConfigError(ValueError):
    pass


@dataclass
class JobSettings:
    seed: int = 0
    clip_length: int = 14
    skip_interval: bool = True
    save_traces: bool = True
    sigma_cond: float = 0.02
    edit: EditRunConfig = field(default_factory=EditRunConfig)
    sarp: SarpConfig = field(default_factory=SarpConfig)
    lora: MotionTrainConfig = field(default_factory=MotionTrainConfig)

    def to_dict(self) -> dict:
        out = {}
        for key, (section, attr) in KEYS.items():
            obj = self if section == "job" else getattr(self, section)
            out[key] = getattr(obj, attr)
        return out


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def settings_from_dict(raw: dict, seed: int | None = None) -> JobSettings:
    flat = _flatten(raw)
    unknown = sorted(set(flat) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    sections = {"job": {}, "edit": {}, "sarp": {}, "lora": {}}
    for key, value in flat.items():
        section, attr = KEYS[key]
        sections[section][attr] = value
    if seed is not None:
        sections["job"]["seed"] = seed
    root = sections["job"].get("seed", 0)
    sections["edit"].setdefault("seed", root)
    sections["sarp"].setdefault("seed", root)
    sections["lora"].setdefault("seed", root)
    try:
        return JobSettings(
            **sections["job"],
            edit=EditRunConfig(**sections["edit"]),
            sarp=SarpConfig(**sections["sarp"]),
            lora=MotionTrainConfig(**sections["lora"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_settings(path, seed: int | None = None) -> JobSettings:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return settings_from_dict(raw, seed)
