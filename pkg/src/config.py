"""
Experiment configuration files
==============================
Configs are flat `dotted.key=value` text files (one setting per line, '#'
comments), read with python-dotenv and validated into ExperimentConfig.
Lists are comma-separated; an empty value means "unset".
"""
import hashlib
import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from errors import ConfigError
from models import ExperimentConfig

load_dotenv()

logger = logging.getLogger(__name__)

ENV_OUTPUT_ROOT = "MAML_LAB_OUTPUT_ROOT"
ENV_LOG_LEVEL = "MAML_LAB_LOG_LEVEL"
ENV_WORKERS = "MAML_LAB_WORKERS"


def output_root() -> Path:
    return Path(os.getenv(ENV_OUTPUT_ROOT, "runs"))


def log_level() -> str:
    return os.getenv(ENV_LOG_LEVEL, "INFO").upper()


def read_config_file(path: Union[str, Path]) -> Dict[str, Optional[str]]:
    """Flat key/value pairs of a config file"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"file not found: {path}"], source=str(path))
    return dict(dotenv_values(path))


def nest(flat: Mapping[str, Any], source: Optional[str] = None) -> Dict[str, Any]:
    """
    Turn dotted keys into nested dicts

    'train.inner_lr=0.01' -> {'train': {'inner_lr': '0.01'}}. Empty values become None.
    """
    nested: Dict[str, Any] = {}
    problems = []
    for key, value in flat.items():
        parts = [part.strip() for part in key.split(".")]
        if any(not part for part in parts):
            problems.append(f"{key}: malformed key")
            continue
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                problems.append(f"{key}: '{part}' is both a value and a section")
                break
            node = child
        else:
            if isinstance(node.get(parts[-1]), dict):
                problems.append(f"{key}: '{parts[-1]}' is both a value and a section")
                continue
            node[parts[-1]] = None if value is None or (isinstance(value, str) and value.strip() == "") else value
    if problems:
        raise ConfigError(problems, source=source)
    return nested


def validate(raw: Mapping[str, Any], source: Optional[str] = None) -> ExperimentConfig:
    """Validate nested settings, reporting every problem with its field path"""
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        problems = [
            f"{'.'.join(str(part) for part in error['loc']) or '<root>'}: {error['msg']}"
            for error in e.errors()
        ]
        raise ConfigError(problems, source=source) from None


def load_experiment_config(
    path: Union[str, Path],
    overrides: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    """
    Load and validate an experiment config

    Args:
        path: Config file
        overrides: Dotted keys that replace file values (e.g. from the command line)

    Returns:
        Validated, immutable ExperimentConfig
    """
    flat: Dict[str, Any] = read_config_file(path)
    if "workers" not in flat and os.getenv(ENV_WORKERS):
        flat["workers"] = os.getenv(ENV_WORKERS)
    for key, value in (overrides or {}).items():
        if value is not None:
            flat[key] = value
    config = validate(nest(flat, source=str(path)), source=str(path))
    logger.info(f"📄 Loaded {config.kind} config from {path} (hash {config_hash(config)[:12]})")
    return config


def _flatten(value: Any, prefix: str, out: Dict[str, str]) -> None:
    if isinstance(value, dict):
        for key, child in value.items():
            _flatten(child, f"{prefix}.{key}" if prefix else key, out)
    elif isinstance(value, list):
        out[prefix] = ",".join(_scalar(item) for item in value)
    else:
        out[prefix] = _scalar(value)


def _scalar(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def canonical_text(config: ExperimentConfig) -> str:
    """Sorted `key=value` lines covering every setting, defaults included"""
    flat: Dict[str, str] = {}
    _flatten(config.model_dump(mode="json"), "", flat)
    return "".join(f"{key}={flat[key]}\n" for key in sorted(flat))


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_text(config).encode("utf-8")).hexdigest()


def with_overrides(config: ExperimentConfig, **overrides: Any) -> ExperimentConfig:
    """Copy with dotted-key overrides applied and validated again"""
    flat: Dict[str, Any] = {}
    _flatten(config.model_dump(mode="json"), "", flat)
    for key, value in overrides.items():
        flat[key.replace("__", ".")] = value
    return validate(nest(flat))
