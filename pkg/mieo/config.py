"""Settings files and the defaults they are merged over.

Settings are plain mappings. A user mapping is merged over a deep copy of the
defaults, command-line overrides are merged last, and the result is validated by
the config dataclass that consumes it.
"""

from __future__ import annotations

from copy import deepcopy
import json
import logging
from pathlib import Path
from typing import Any, Mapping
import warnings

import yaml

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

# Default MIEO settings. ``None`` widths are derived from the schema by geometric
# interpolation when the model is built.
DEFAULT_MIEO_SETTINGS = {
    "embedding_dim": 32,
    "encoder_widths": None,
    "decoder_widths": None,
    "w_bin": 1.0,
    "w_cont": 1.0,
    "aug_mask_prob": 0.2,
    "leaky_slope": 0.01,
    "embedding_batchnorm": True,
    "lr": 1e-3,
    "epochs": 30,
    "batch_size": 64,
    "seed": 0,
}

DEFAULT_CLASSIFIER_SETTINGS = {
    "hidden_widths": [64, 32, 16],
    "leaky_slope": 0.01,
    "pos_weight": "auto",
    "lr": 1e-3,
    "epochs": 40,
    "batch_size": 64,
    "seed": 0,
    "decision_threshold": 0.5,
}

# Keys accepted for backward compatibility, mapped to their current name.
DEPRECATED_KEYS = {"random_state": "seed"}

SETTINGS_SUFFIXES = (".json", ".yaml", ".yml")


def load_settings(path: str | Path) -> dict[str, Any]:
    """Read a JSON or YAML settings file into a mapping."""
    path = Path(path)
    if path.suffix not in SETTINGS_SUFFIXES:
        raise ConfigError(
            f"Settings file {path} must end with one of {', '.join(SETTINGS_SUFFIXES)}."
        )
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix == ".json":
            settings = json.loads(text) if text.strip() else {}
        else:
            settings = yaml.safe_load(text) or {}
    except (json.JSONDecodeError, yaml.YAMLError) as err:
        raise ConfigError(f"Could not parse settings file {path}: {err}") from err

    if not isinstance(settings, dict):
        raise ConfigError(f"Settings file {path} must contain a mapping at top level.")
    logger.debug("Loaded %d settings from %s", len(settings), path)
    return settings


def _rename_deprecated(settings: Mapping[str, Any]) -> dict[str, Any]:
    renamed = {}
    for key, value in settings.items():
        if key in DEPRECATED_KEYS:
            warnings.warn(
                f"{key!r} will soon be deprecated. "
                f"Use {DEPRECATED_KEYS[key]!r} instead.",
                FutureWarning,
            )
            key = DEPRECATED_KEYS[key]
        renamed[key] = value
    return renamed


def resolve_settings(
    defaults: Mapping[str, Any],
    file_settings: Mapping[str, Any] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> dict[str, Any]:
    """Merge file settings and then overrides over a copy of ``defaults``.

    Overrides set to ``None`` are ignored so that unset command-line flags leave
    file values in place.
    """
    file_settings = _rename_deprecated(file_settings or {})
    overrides = {
        key: value
        for key, value in _rename_deprecated(overrides or {}).items()
        if value is not None
    }

    unknown = (set(file_settings) | set(overrides)) - set(defaults)
    if unknown:
        raise ConfigError(f"Unknown settings: {sorted(unknown)}")

    return deepcopy(dict(defaults)) | file_settings | overrides


def as_float(name: str, value: Any) -> float:
    try:
        return float(value)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"Setting {name!r} must be a number, got {value!r}.") from err


def as_int(name: str, value: Any) -> int:
    try:
        number = float(value)
    except (TypeError, ValueError) as err:
        raise ConfigError(
            f"Setting {name!r} must be an integer, got {value!r}."
        ) from err
    if not number.is_integer():
        raise ConfigError(f"Setting {name!r} must be an integer, got {value!r}.")
    return int(number)


def as_widths(name: str, value: Any) -> tuple[int, ...] | None:
    if value is None:
        return None
    if isinstance(value, (str, bytes)) or not hasattr(value, "__iter__"):
        raise ConfigError(f"Setting {name!r} must be a list of integers.")
    return tuple(as_int(name, width) for width in value)
