"""Run configuration: INI files with dotted section names, ``--set`` overrides and a stable fingerprint.

Every key has a default below; a config file only needs the keys it changes::

    [schedule]
    n_syn = 4
    n_real = 8

    [match.inner]
    syn_steps = 20
"""
from __future__ import annotations

import configparser
import copy
import hashlib
import json
import os
from dataclasses import dataclass

from .exceptions import InvalidConfigError

DEFAULTS: dict[str, dict] = {
    "run": {"seed": 0, "out": "runs", "budget_bytes": 0},
    "data": {
        "source": "moving_shapes",  # or a directory of class/video/frame images
        "canvas": 32,
        "num_appearances": 4,
        "num_directions": 2,
        "shape_size": 8,
        "speed": 1,
        "frames": 16,
        "channels": 1,
        "noise_std": 0.1,
        "jitter": -1,  # max start offset around the centred path; -1 = anywhere
        "clips_per_class": 20,
        "test_clips_per_class": 20,
        "seed": 1,
    },
    "model": {"arch": "MiniC3D"},
    "schedule": {"n_syn": 16, "n_real": 16, "k": 1, "interp": "duplicate", "l_syn": 16},
    "match": {
        "matcher": "distribution_dm",
        "lr_img": 1.0,
        "batch_real": 16,
        "batch_syn": 0,
        "iterations": 200,
        "momentum": 0.5,
        "init": "real",
        "hflip": 0.0,
        "ipc": 1,
    },
    "match.inner": {
        "syn_steps": 10,
        "expert_epochs": 1,
        "max_start_epoch": 10,
        "lr_teacher": 0.01,
        "num_experts": 5,
        "expert_train_epochs": 15,
    },
    "stage": {
        "spc": 1,
        "dpc": 1,
        "lr_static": 1.0,
        "static_batch_real": 32,
        "static_iterations": 200,
        "lr_dynamic": 100.0,
        "lr_hal": 1e-2,
        "frames_dynamic": 0,
        "n_real": 0,
        "variant": "single_block",
        "dynamic_matcher": "distribution_dm",
        "dynamic_iterations": 200,
        "early_stop_window": 20,
        "early_stop_tol": 0.0,
    },
    "interp": {"epochs": 60, "lr": 1e-3, "batch_size": 16, "width": 16, "depth": 3},
    "eval": {
        "arch": "MiniC3D",
        "cross_arch": "",
        "epochs": 200,
        "lr": 0.05,
        "batch_size": 16,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "shift": 4,
        "seeds": "0,1,2",
    },
    "coreset": {"method": "random", "ipc": 1},
    "sweep": {
        "n_syn": "1,2,4",
        "n_real": "1,2,4",
        "k": "1",
        "interp": "duplicate",
        "iterations": 20,
        "evaluate": False,
        "l_syn": 16,
    },
    "inspect": {"artifact": "", "grid_items": 4},
}


def _coerce(section: str, key: str, raw):
    try:
        default = DEFAULTS[section][key]
    except KeyError:
        raise InvalidConfigError(f"unknown config key {section}.{key}") from None
    if not isinstance(raw, str):
        value = raw
    elif isinstance(default, bool):
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise InvalidConfigError(f"{section}.{key} expects a boolean, got {raw!r}")
        value = low in ("1", "true", "yes", "on")
    elif isinstance(default, int):
        try:
            value = int(raw)
        except ValueError:
            raise InvalidConfigError(f"{section}.{key} expects an integer, got {raw!r}") from None
    elif isinstance(default, float):
        try:
            value = float(raw)
        except ValueError:
            raise InvalidConfigError(f"{section}.{key} expects a number, got {raw!r}") from None
    else:
        value = raw.strip()
    return value


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration; ``values[section][key]``."""

    values: dict

    def __getitem__(self, dotted: str):
        section, _, key = dotted.rpartition(".")
        try:
            return self.values[section][key]
        except KeyError:
            raise InvalidConfigError(f"unknown config key {dotted}") from None

    def section(self, name: str) -> dict:
        return dict(self.values[name])

    def with_overrides(self, overrides) -> "RunConfig":
        values = copy.deepcopy(self.values)
        for item in overrides:
            if isinstance(item, str):
                if "=" not in item:
                    raise InvalidConfigError(f"override must look like section.key=value, got {item!r}")
                dotted, raw = item.split("=", 1)
            else:
                dotted, raw = item
            section, _, key = dotted.strip().rpartition(".")
            if not section:
                raise InvalidConfigError(f"override key needs a section: {dotted!r}")
            values.setdefault(section, {})[key] = _coerce(section, key, raw)
        return _validated(values)

    def to_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"))

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section, items in self.values.items():
            cp[section] = {k: str(v) for k, v in items.items()}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)


def int_list(text) -> list[int]:
    if isinstance(text, int):
        return [text]
    try:
        return [int(t) for t in str(text).replace(" ", "").split(",") if t]
    except ValueError:
        raise InvalidConfigError(f"expected a comma-separated integer list, got {text!r}") from None


def _validated(values: dict) -> RunConfig:
    for section, items in DEFAULTS.items():
        if section not in values:
            raise InvalidConfigError(f"missing section {section}")
        missing = set(items) - set(values[section])
        if missing:
            raise InvalidConfigError(f"missing keys in [{section}]: {sorted(missing)}")
    if values["run"]["budget_bytes"] < 0:
        raise InvalidConfigError("run.budget_bytes must be positive (0 disables the check)")
    src = values["data"]["source"]
    if src != "moving_shapes" and not os.path.isdir(src):
        raise InvalidConfigError(f"data.source {src!r} is neither 'moving_shapes' nor an existing directory")
    for key in ("seeds",):
        int_list(values["eval"][key])
    for key in ("n_syn", "n_real", "k"):
        int_list(values["sweep"][key])
    for section, key in (("match", "lr_img"), ("eval", "lr"), ("stage", "lr_static"), ("interp", "lr")):
        if values[section][key] < 0:
            raise InvalidConfigError(f"{section}.{key} must be non-negative")
    if values["eval"]["shift"] < 0:
        raise InvalidConfigError("eval.shift must be non-negative")
    return RunConfig(values)


def load_config(path: str | None = None, overrides=()) -> RunConfig:
    """Defaults, then the INI file at ``path`` (if any), then ``section.key=value`` overrides."""
    values = copy.deepcopy(DEFAULTS)
    if path:
        if not os.path.isfile(path):
            raise InvalidConfigError(f"config file {path!r} does not exist")
        cp = configparser.ConfigParser()
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise InvalidConfigError(f"cannot parse {path}: {exc}") from exc
        for section in cp.sections():
            if section not in DEFAULTS:
                raise InvalidConfigError(f"unknown config section [{section}]")
            for key, raw in cp[section].items():
                values[section][key] = _coerce(section, key, raw)
    return _validated(values).with_overrides(overrides)
