"""Run configuration: one flat namespace of dotted keys, stored as JSON.

Every key has a typed default. A config file may override any subset; an
unknown key or a value of the wrong type is a :class:`ConfigError`.
Presets bundle overrides for common runs (``smoke`` for quick checks,
``accept`` for the acceptance suite).
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data.n": 2000,
    "data.max_objects": 4,
    "data.n_eval": 100,
    "captioner.d_model": 64,
    "captioner.n_layers": 2,
    "captioner.max_len": 32,
    "captioner.lr": 3e-3,
    "captioner.steps": 4500,
    "captioner.batch": 32,
    "captioner.text_only_fraction": 0.25,
    "captioner.summary_weight": 2.0,
    "decoder.hidden": 256,
    "decoder.n_hidden": 3,
    "decoder.cond_dim": 64,
    "decoder.output": "data",
    "decoder.input_scale": "t",
    "decoder.cond_skip": True,
    "decoder.t_power": 3.0,
    "stage1.steps": 5000,
    "stage1.lr": 3e-3,
    "stage1.batch": 64,
    "stage1.p_drop": 0.1,
    "stage2.steps": 300,
    "stage2.group_size": 4,
    "stage2.lr": 1e-6,
    "stage2.clip_eps": 0.2,
    "stage2.beta": 0.0,
    "stage2.temperature": 1.0,
    "stage2.reward_backbone": "overall",
    "stage2.groups_per_update": 1,
    "stage2.refresh_every": 1,
    "stage2.reward_steps": 40,
    "stage2.seed": 0,
    "stage3.steps": 200,
    "stage3.group_size": 8,
    "stage3.lr": 1e-5,
    "stage3.clip_eps": 0.2,
    "stage3.beta": 0.01,
    "stage3.rollout_steps": 20,
    "stage3.validation_steps": 30,
    "stage3.noise_level": 0.7,
    "stage3.reward_backbone": "overall",
    "stage3.groups_per_update": 1,
    "stage3.refresh_every": 1,
    "stage3.captioner": "stage2",
    "stage3.seed": 0,
    "sampler.eval_steps": 40,
    "sampler.cfg_scale": 1.0,
    "sampler.seed": 0,
    "eval.every": 0,
    "checkpoint.every": 0,
    "log.timing": True,
    "paths.workdir": "run",
}

PRESETS: dict[str, dict[str, Any]] = {
    "default": {},
    # the stated KL coefficient for stage 2, as an alternative to no penalty
    "stage2-kl": {"stage2.beta": 1e-6},
    "smoke": {
        "data.n": 64, "data.n_eval": 8, "captioner.steps": 200, "stage1.steps": 200,
        "stage2.steps": 3, "stage3.steps": 3, "stage2.reward_steps": 8, "stage3.rollout_steps": 6,
        "stage3.validation_steps": 8, "sampler.eval_steps": 8, "stage3.group_size": 4,
    },
    "accept": {"log.timing": False, "stage2.lr": 1e-5},
}

# keys that change array shapes or training data; checkpoints record their hash
COMPAT_PREFIXES = ("data.", "captioner.d_model", "captioner.n_layers", "captioner.max_len", "decoder.", "seed")

_POSITIVE = {k for k, v in DEFAULTS.items() if isinstance(v, int) and not isinstance(v, bool)
             and not k.endswith((".every", "seed"))}


class RunConfig(Mapping):
    """Immutable mapping of dotted keys to values."""

    def __init__(self, values: Mapping[str, Any] | None = None, preset: str = "default"):
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        merged = dict(DEFAULTS)
        merged.update(PRESETS[preset])
        for k, v in (values or {}).items():
            merged[k] = _coerce(k, v)
        _validate(merged)
        self._values = merged
        self.preset = preset

    def __getitem__(self, key: str):
        try:
            return self._values[key]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def with_overrides(self, values: Mapping[str, Any] | None = None, **dotted) -> "RunConfig":
        """Copy with overrides; keyword names use ``__`` for dots (``stage2__lr=1e-5``)."""
        changes = dict(values or {})
        changes.update({k.replace("__", "."): v for k, v in dotted.items()})
        vals = dict(self._values)
        for k, v in changes.items():
            vals[k] = _coerce(k, v)
        _validate(vals)
        out = RunConfig.__new__(RunConfig)
        out._values, out.preset = vals, self.preset
        return out

    def to_json(self) -> str:
        return json.dumps(self._values, indent=2, sort_keys=True)

    def hash(self, prefixes=("",)) -> str:
        items = {k: v for k, v in self._values.items() if k.startswith(tuple(prefixes))}
        return hashlib.sha256(json.dumps(items, sort_keys=True).encode()).hexdigest()[:16]

    def compat_hash(self) -> str:
        return self.hash(COMPAT_PREFIXES)


def _coerce(key: str, value):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string")
    return value


def _validate(vals: dict) -> None:
    for k in _POSITIVE:
        if vals[k] <= 0:
            raise ConfigError(f"{k} must be positive, got {vals[k]}")
    for k in ("eval.every", "checkpoint.every", "seed", "stage2.seed", "stage3.seed", "sampler.seed"):
        if vals[k] < 0:
            raise ConfigError(f"{k} must be >= 0")
    for k in ("captioner.lr", "stage1.lr", "stage2.lr", "stage3.lr", "stage2.temperature", "stage2.clip_eps",
              "stage3.clip_eps"):
        if vals[k] <= 0:
            raise ConfigError(f"{k} must be positive")
    for k in ("stage2.beta", "stage3.beta", "sampler.cfg_scale"):
        if vals[k] < 0:
            raise ConfigError(f"{k} must be >= 0")
    if vals["stage3.noise_level"] <= 0:
        raise ConfigError("stage3.noise_level must be > 0 (a zero-noise SDE has no transition density)")
    if not 0 <= vals["stage1.p_drop"] < 1 or not 0 <= vals["captioner.text_only_fraction"] <= 1:
        raise ConfigError("probabilities must lie in [0, 1)")
    if vals["captioner.summary_weight"] < 0:
        raise ConfigError("captioner.summary_weight must be >= 0")
    if vals["stage2.group_size"] < 2 or vals["stage3.group_size"] < 2:
        raise ConfigError("group sizes must be >= 2")
    if vals["stage3.captioner"] not in ("pretrained", "stage2"):
        raise ConfigError("stage3.captioner must be 'pretrained' or 'stage2'")
    if vals["decoder.output"] not in ("data", "velocity"):
        raise ConfigError("decoder.output must be 'data' or 'velocity'")
    if vals["decoder.input_scale"] not in ("t", "none"):
        raise ConfigError("decoder.input_scale must be 't' or 'none'")
    if vals["decoder.t_power"] <= 0:
        raise ConfigError("decoder.t_power must be positive")
    for k in ("stage2.reward_backbone", "stage3.reward_backbone"):
        if vals[k] not in ("overall", "pix-down", "cell-hist", "edge-orient", "patch-moments"):
            raise ConfigError(f"{k}: unknown backbone {vals[k]!r}")


def load_config(path=None, preset: str = "default", overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read a JSON object of dotted keys (file optional) and apply ``overrides`` last."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold one JSON object")
        values.update(raw)
    values.update(overrides or {})
    return RunConfig(values, preset)


def parse_override(text: str) -> tuple[str, Any]:
    """``key=value`` from the command line; the value is parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    k, v = text.split("=", 1)
    try:
        return k.strip(), json.loads(v)
    except json.JSONDecodeError:
        return k.strip(), v
