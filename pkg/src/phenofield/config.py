"""Pipeline configuration: TOML file, defaults and command-line overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SCHEMA_VERSION = "1"
PRESETS = ("classic", "hash-density", "hash-sdf")


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "preset": "hash-density",
    "out": "run",
    "data": "",
    "field": {
        "levels": 16,
        "table_size": 2**19,
        "features_per_entry": 2,
        "base_resolution": 16,
        "max_resolution": 524288,
        "dtype": "float32",
        "density_scale": 1.0,
    },
    "train": {
        "iterations": 3000,
        "batch_rays": 4096,
        "lr_tables": 1e-2,
        "lr_network": 1e-3,
        "decay": 0.33,
        "beta1": 0.9,
        "beta2": 0.99,
        "eps": 1e-15,
        "eikonal_weight": 0.1,
        "val_interval": 500,
        "bounds_fraction": 0.5,
    },
    "render": {"n_coarse": 64, "n_fine": 128, "background": [1.0, 1.0, 1.0], "depth_scale": 1000.0},
    "extract": {
        "resolution": 128,
        "threshold": 10.0,
        "iso": 0.0,
        "mode": "cells",
        "center": [],  # empty = field bounds
        "half_extent": 0.0,
        "exterior_only": False,
    },
    "icp": {"max_iterations": 50, "tolerance": 1e-6, "max_distance": 0.1, "trim": 0.0, "voxel_fraction": 0.0025},
    "segmentation": {"radius": 10.0, "min_size": 10, "hue_bands": [], "min_saturation": 0.0, "min_value": 0.0},
    "plate": {
        "size_mm": [240.0, 160.0],
        "threshold": 0.005,
        "iterations": 500,
        "min_inliers": 50,
        "min_inlier_fraction": 0.05,
    },
    "measure": {"gravity": [0.0, 0.0, 1.0], "robust": False, "references_cm": []},
}


def _merge(base: dict, extra: dict, where: str = ""):
    for key, value in extra.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"{path}: unknown config key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a section")
            _merge(base[key], value, path + ".")
        else:
            base[key] = _coerce(base[key], value, path)


def _coerce(default, value, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{path}: expected an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return list(value)
    return value


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the TOML file, then ``overrides`` ({"train.iterations": 10, ...})."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        _merge(cfg, doc)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        *sections, key = dotted.split(".")
        node = cfg
        for s in sections:
            node = node.get(s)
            if not isinstance(node, dict):
                raise ConfigError(f"{dotted}: unknown config key")
        _merge(node, {key: value}, ".".join(sections) + "." if sections else "")
    validate(cfg)
    return cfg


def validate(cfg: dict):
    if cfg["preset"] not in PRESETS:
        raise ConfigError(f"preset: must be one of {', '.join(PRESETS)}")
    t = cfg["train"]
    if t["iterations"] < 0:
        raise ConfigError("train.iterations: must be >= 0")
    if t["batch_rays"] < 1:
        raise ConfigError("train.batch_rays: must be >= 1")
    if t["lr_tables"] <= 0 or t["lr_network"] <= 0:
        raise ConfigError("train.lr: learning rates must be positive")
    if cfg["field"]["dtype"] not in ("float32", "float64"):
        raise ConfigError("field.dtype: float32 or float64")
    if not cfg["field"]["density_scale"] > 0:
        raise ConfigError("field.density_scale: must be positive")
    ts = cfg["field"]["table_size"]
    if ts < 1 or ts & (ts - 1):
        raise ConfigError("field.table_size: must be a power of two")
    if cfg["render"]["n_coarse"] < 2 or cfg["render"]["n_fine"] < 0:
        raise ConfigError("render: need n_coarse >= 2 and n_fine >= 0")
    if cfg["extract"]["resolution"] < 8:
        raise ConfigError("extract.resolution: must be >= 8")
    if cfg["extract"]["mode"] not in ("cells", "crossings"):
        raise ConfigError("extract.mode: cells or crossings")
    if not 0 <= cfg["icp"]["trim"] <= 0.5:
        raise ConfigError("icp.trim: must lie in [0, 0.5]")
    if len(cfg["plate"]["size_mm"]) != 2 or min(cfg["plate"]["size_mm"]) <= 0:
        raise ConfigError("plate.size_mm: need two positive side lengths")


def digest(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def out_dirs(root) -> dict:
    root = Path(root)
    dirs = {name: root / name for name in ("checkpoints", "renders", "clouds", "reports")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs
