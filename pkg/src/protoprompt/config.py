"""Run-config loading, dotted overrides, digests and snapshots.

Example:
    >>> cfg = load_config(None, overrides=["optimizer.rate=0.01", "mpg.fusion=multiplication"])
    >>> cfg.optimizer.rate
    0.01
    >>> cfg.mpg.fusion.value
    'multiplication'
"""

import hashlib
import io
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Optional

from pydantic import ValidationError
from ruamel.yaml import YAML
from ruamel.yaml.error import YAMLError

from protoprompt.exceptions import ConfigError
from protoprompt.io_utils import atomic_write_yaml
from protoprompt.models import RunConfig

logger = logging.getLogger(__name__)

SNAPSHOT_NAME = "config.snapshot"


def parse_scalar(text: str) -> Any:
    """Parse an override value the way YAML would parse a scalar.

    Examples:
        >>> parse_scalar("0.001")
        0.001
        >>> parse_scalar("rpn+rcnn")
        'rpn+rcnn'
        >>> parse_scalar("[1, 5]")
        [1, 5]
        >>> parse_scalar("null") is None
        True
    """
    yaml = YAML(typ="safe")
    try:
        return yaml.load(io.StringIO(text))
    except YAMLError as e:
        raise ConfigError(f"cannot parse value {text!r}: {e}") from e


def parse_override(override: str) -> tuple[list[str], Any]:
    """Split ``a.b.c=value`` into its key path and parsed value.

    Examples:
        >>> parse_override("loss.temperature=0.05")
        (['loss', 'temperature'], 0.05)
        >>> parse_override("seed")
        Traceback (most recent call last):
        ...
        protoprompt.exceptions.ConfigError: override 'seed' is not of the form key=value
    """
    if "=" not in override:
        raise ConfigError(f"override {override!r} is not of the form key=value")
    key, value = override.split("=", 1)
    path = [part.strip() for part in key.strip().split(".")]
    if not all(path):
        raise ConfigError(f"override {override!r} has an empty key segment")
    return path, parse_scalar(value)


def apply_overrides(data: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """Apply dotted overrides to a nested dict in place and return it.

    Examples:
        >>> apply_overrides({"a": {"b": 1}}, ["a.b=2", "a.c=x"])
        {'a': {'b': 2, 'c': 'x'}}
    """
    for override in overrides:
        path, value = parse_override(override)
        node = data
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {override!r}: {part!r} is not a section")
            node = child
        node[path[-1]] = value
    return data


def validate_config(data: dict[str, Any], source: str = "config") -> RunConfig:
    """Validate a raw dict into a :class:`RunConfig`, mapping errors to ConfigError."""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"{source}: {problems}") from e


def load_config(
    path: Optional[Path],
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
) -> RunConfig:
    """Load a YAML run config, apply overrides, then validate.

    Args:
        path: YAML file, or None for the built-in defaults
        overrides: ``dotted.key=value`` strings applied after the file
        seed: if given, replaces the top-level ``seed``

    Returns:
        The validated run config
    """
    data: dict[str, Any] = {}
    if path is not None:
        yaml = YAML(typ="safe")
        try:
            with open(path) as f:
                loaded = yaml.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except YAMLError as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from e
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping at the top level")
        data = loaded or {}
    apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    config = validate_config(data, source=str(path) if path else "config")
    logger.debug("Loaded config %s (digest %s)", path, config_digest(config)[:12])
    return config


def config_to_dict(config: RunConfig) -> dict[str, Any]:
    return config.model_dump(mode="json")


def config_digest(config: RunConfig, exclude: tuple[str, ...] = ()) -> str:
    """SHA-256 of the canonical JSON form of a config.

    Examples:
        >>> config_digest(RunConfig()) == config_digest(RunConfig())
        True
        >>> config_digest(RunConfig()) == config_digest(RunConfig(seed=1))
        False
        >>> config_digest(RunConfig(), exclude=("seed",)) == config_digest(RunConfig(seed=1), exclude=("seed",))
        True
    """
    data = {k: v for k, v in config_to_dict(config).items() if k not in exclude}
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_snapshot(config: RunConfig, run_dir: Path) -> Path:
    """Write the config snapshot that makes a run directory self-describing."""
    target = run_dir / SNAPSHOT_NAME
    atomic_write_yaml(target, config_to_dict(config))
    return target


def with_updates(config: RunConfig, overrides: Iterable[str]) -> RunConfig:
    """Return a copy of ``config`` with dotted overrides applied and revalidated."""
    return validate_config(apply_overrides(config_to_dict(config), overrides))
