"""JSON run configuration: defaults, validation, file loading, overrides."""

import copy
import json
import os
from pathlib import Path

from .dataset import DEFAULT_EXTRACTOR

DEFAULTS = {
    "dataset": {
        "frame_extractor_cmd": DEFAULT_EXTRACTOR,
        "fps": 24.0,
        "fractions": [0.75, 0.25, 0.0],
        "seed": 0,
    },
    "model": {
        "preset": "tiny",
        "input_size": None,
        "seed": 0,
    },
    "detector": {
        "cascade": None,
        "scale_factor": 1.1,
        "min_size": 24,
        "step": 2.0,
        "min_neighbors": 2,
        "iou_threshold": 0.3,
    },
    "pipeline": {
        "unknown_threshold": 0.5,
        "stride": 5,
        "smoothing_window": 5,
        "crop_margin": 0.2,
        "offset_fraction": 0.2,
        "iou_match": 0.3,
        "max_age": 10,
        "queue_capacity": 8,
        "threaded": True,
        "log_timings": False,
    },
    "train": {
        "epochs": 30,
        "batch_size": 32,
        "lr": 0.01,
        "momentum": 0.9,
        "lr_decay": 0.1,
        "lr_milestones": [20, 27],
        "seed": 0,
        "checkpoint_every": 10,
        "augment": False,
        "weight_decay": 0.0,
    },
    "bench": {
        "frames": 300,
        "warmup": 30,
        "frame_size": 64,
        "seed": 0,
    },
}

# keys whose default is None, with the types they accept
_NULLABLE = {("model", "input_size"): (int,), ("detector", "cascade"): (str,)}


class ConfigError(ValueError):
    pass


def default_config():
    return copy.deepcopy(DEFAULTS)


def _check_type(path, default, value):
    if value is None:
        if tuple(path) in _NULLABLE:
            return
        raise ConfigError(f"{'.'.join(path)} must not be null")
    if default is None:
        allowed = _NULLABLE[tuple(path)]
    elif isinstance(default, bool):
        allowed = (bool,)
    elif isinstance(default, float):
        allowed = (int, float)
    elif isinstance(default, int):
        allowed = (int,)
    else:
        allowed = (type(default),)
    if isinstance(value, bool) and bool not in allowed:
        raise ConfigError(f"{'.'.join(path)} must be {allowed[0].__name__}, got bool")
    if not isinstance(value, allowed):
        raise ConfigError(f"{'.'.join(path)} must be {allowed[0].__name__}, got {type(value).__name__}")


def merge(base, overrides, path=()):
    """Recursively apply ``overrides`` onto ``base``, rejecting unknown keys."""
    if not isinstance(overrides, dict):
        raise ConfigError(f"{'.'.join(path) or 'config'} must be an object")
    for key, value in overrides.items():
        here = path + (key,)
        if key not in base:
            raise ConfigError(f"unknown config key: {'.'.join(here)}")
        if isinstance(base[key], dict):
            merge(base[key], value, here)
        else:
            _check_type(here, _default_at(here), value)
            base[key] = value
    return base


def _default_at(path):
    node = DEFAULTS
    for key in path:
        node = node[key]
    return node


def load_config(path=None, env=None):
    """Defaults merged with the file at ``path`` (or ``$FACEPIPE_CONFIG``)."""
    env = os.environ if env is None else env
    cfg = default_config()
    path = path or env.get("FACEPIPE_CONFIG")
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        merge(cfg, data)
    return cfg


def set_value(cfg, dotted, value):
    """Flag override; ``None`` means the flag was not given."""
    if value is None:
        return
    merge(cfg, _nest(dotted.split("."), value))


def _nest(keys, value):
    return {keys[0]: _nest(keys[1:], value)} if len(keys) > 1 else {keys[0]: value}


def dumps(cfg):
    return json.dumps(cfg, indent=2, sort_keys=True)
