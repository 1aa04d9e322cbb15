"""Sectioned run-config files for training.

Example::

    [train]
    lr = 1e-3
    iterations = 30000

    [backbone]
    architecture = reference-vgg16
    pretrained = true

    [data]
    data_root = data/tiles
    train_manifest = data/tiles/manifest.csv

    [ablation]
    row = S2Q-TA+Q2S

Every key is checked against the schema below; unknown sections or keys
are rejected. Relative paths in ``[data]`` resolve against the config
file's directory.
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path
from typing import Any, Mapping

from .backbone import BackboneConfig
from .engine import ABLATION_ROWS, AblationConfig, TrainConfig

SCHEMA: dict[str, tuple[str, ...]] = {
    "train": ("lr", "momentum", "iterations", "alpha", "lambda_par", "way", "shot", "seed",
              "checkpoint_every", "normalize_by_attention"),
    "backbone": tuple(f.name for f in dataclasses.fields(BackboneConfig)),
    "data": ("data_root", "train_manifest", "test_manifest", "image_side", "augment", "min_fg_fraction"),
    "texture": ("texture_filters", "texture_kernel", "texture_wavelengths"),
    "grabcut": ("grabcut_iterations", "grabcut_gamma", "grabcut_k", "refine_classes"),
    "ablation": ("row",) + tuple(f.name for f in dataclasses.fields(AblationConfig)),
}
PATH_KEYS = ("data_root", "train_manifest", "test_manifest")


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


def _defaults() -> dict[str, Any]:
    out = {f.name: getattr(TrainConfig(), f.name) for f in dataclasses.fields(TrainConfig)}
    out.update(BackboneConfig().to_dict())
    out.update(dataclasses.asdict(AblationConfig()))
    out["row"] = ""
    return out


def _convert(key: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            elem = type(default[0]) if default else int
            return tuple(elem(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Parse and validate a config file into a flat ``{key: value}`` dict."""
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc.message.splitlines()[0]}") from None
    defaults = _defaults()
    values: dict[str, Any] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]; expected one of {', '.join(SCHEMA)}")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            values[key] = _convert(key, raw, defaults[key])
    for key in PATH_KEYS:
        if values.get(key) and not Path(values[key]).is_absolute():
            values[key] = str(path.parent / values[key])
    return values


def build_configs(values: Mapping[str, Any]) -> tuple[TrainConfig, AblationConfig]:
    """Assemble train and ablation configs from flat values over defaults."""
    values = dict(values)
    unknown = set(values) - set(_defaults())
    if unknown:
        raise ConfigError(f"unknown settings: {', '.join(sorted(unknown))}")
    row = values.pop("row", "") or ""
    flag_names = [f.name for f in dataclasses.fields(AblationConfig)]
    if row:
        if row not in ABLATION_ROWS:
            raise ConfigError(f"unknown ablation row {row!r}; expected one of {', '.join(ABLATION_ROWS)}")
        base = dataclasses.asdict(ABLATION_ROWS[row])
    else:
        base = dataclasses.asdict(AblationConfig())
    base.update({k: values.pop(k) for k in flag_names if k in values})
    bb = BackboneConfig().to_dict()
    bb.update({k: values.pop(k) for k in list(bb) if k in values})
    try:
        ablation = AblationConfig(**base)
        train = TrainConfig(backbone=BackboneConfig(**bb), **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return train, ablation


def load_run_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> tuple[TrainConfig, AblationConfig]:
    """Read ``path`` (optional) and apply ``overrides``; ``None`` overrides are ignored."""
    values = read_config_file(path) if path is not None else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_configs(values)
