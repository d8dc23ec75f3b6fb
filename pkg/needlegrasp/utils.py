# coding: utf8
"""Helper functions, utilites, etc."""

import copy
import logging
import os
import pathlib
import tempfile
from typing import Any, Iterable, Optional

import coloredlogs

from .__about__ import __version__
from .exceptions import ConfigError

ROOT_LOGGER = "needlegrasp"
LOG_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"
LOG_LEVEL_ENV = "NEEDLEGRASP_LOG_LEVEL"
OUTPUT_DIR_ENV = "NEEDLEGRASP_OUTPUT_DIR"

TOML_CONF_HEADER = f"# Generated by needlegrasp v{__version__}\n"
# bump when a CSV column is added, removed or reordered
CSV_SCHEMA_VERSION = 1
CSV_SCHEMA_HEADER = f"# needlegrasp csv schema v{CSV_SCHEMA_VERSION}\n"

os.environ.setdefault("COLOREDLOGS_LOG_FORMAT", LOG_FORMAT)

_installed = False


def get_logger(name: str, level: Optional[str] = None) -> logging.Logger:
    """Create a new logger.

    The coloredlogs handler lives on the package root logger, so every module
    logger only has to propagate to it.

    Args:
        name: The name to assign to the logger.
        level (default: $NEEDLEGRASP_LOG_LEVEL or INFO): Must be a standard
            logging level. Only used the first time a logger is requested.

    Returns:
        The logger.
    """

    global _installed

    if not _installed:
        level = level or os.environ.get(LOG_LEVEL_ENV, "INFO")
        coloredlogs.install(
            level=level, logger=logging.getLogger(ROOT_LOGGER), fmt=LOG_FORMAT
        )
        _installed = True

    return logging.getLogger(name)


def set_verbosity(verbose: int = 0, quiet: bool = False) -> str:
    """Map the CLI verbosity flags onto a logging level for the package.

    Args:
        verbose: How many times --verbose was passed.
        quiet: Whether --quiet was passed (wins over --verbose).

    Returns:
        The name of the level that was applied.
    """

    if quiet:
        level = "ERROR"
    elif verbose >= 2:
        level = "DEBUG"
    elif verbose == 1:
        level = "INFO"
    else:
        level = os.environ.get(LOG_LEVEL_ENV, "WARNING")

    get_logger(ROOT_LOGGER)
    # reinstalling replaces the handler coloredlogs put on the package logger
    coloredlogs.install(
        level=level, logger=logging.getLogger(ROOT_LOGGER), fmt=LOG_FORMAT
    )
    return level


def merge_defaults(data: dict, defaults: dict, path: str = "") -> dict:
    """Merge a user tree into a default tree.

    Unlike a plain dict update, unknown keys are rejected and nested sections
    are merged key by key. Values whose default is None are required.

    Args:
        data: The user supplied values.
        defaults: The default values. Nested dicts are treated as sections.
        path: Dotted prefix used in error messages.

    Returns:
        A new dict with every default filled in.

    Raises:
        ConfigError: On unknown keys, missing required keys, values of the
            wrong type or a section given as a scalar.
    """

    unknown = sorted(set(data) - set(defaults))
    if unknown:
        raise ConfigError(
            f"unknown config key(s): {', '.join(_dotted(path, k) for k in unknown)}"
        )

    merged = {}
    for key, default in defaults.items():
        dotted = _dotted(path, key)

        if isinstance(default, dict):
            value = data.get(key, {})
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted} must be a section")
            merged[key] = merge_defaults(value, default, dotted)
            continue

        value = data.get(key, default)
        if value is None:
            raise ConfigError(f"field required: {dotted}")
        if default is not None and not _same_kind(default, value):
            raise ConfigError(
                f"config key {dotted} expects {type(default).__name__}, got {type(value).__name__}"
            )

        merged[key] = copy.deepcopy(value)

    return merged


def deep_update(base: dict, overrides: dict) -> dict:
    """Return a copy of base with a nested override tree applied."""

    result = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = deep_update(result[key], value)
        else:
            result[key] = copy.deepcopy(value)
    return result


def _same_kind(default: Any, value: Any) -> bool:
    if isinstance(default, bool) or isinstance(value, bool):
        return isinstance(default, bool) and isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float))
    if isinstance(default, (list, tuple)):
        return isinstance(value, (list, tuple))
    return isinstance(value, type(default))


def _dotted(prefix: str, key: str) -> str:
    return f"{prefix}.{key}" if prefix else key


def fmt(value: Any) -> str:
    """Format a value for CSV output with a fixed precision."""

    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def output_dir(default: Optional[str] = None) -> pathlib.Path:
    """Resolve the output directory, honouring $NEEDLEGRASP_OUTPUT_DIR."""

    pth = pathlib.Path(os.environ.get(OUTPUT_DIR_ENV) or default or ".")
    pth.mkdir(parents=True, exist_ok=True)
    return pth


def atomic_write(pth: pathlib.Path, text: str) -> pathlib.Path:
    """Write a text file atomically (temp file in the same folder, then rename).

    Args:
        pth: The destination path.
        text: The file contents.

    Returns:
        The destination path.
    """

    pth = pathlib.Path(pth)
    pth.parent.mkdir(parents=True, exist_ok=True)

    fd, tmp = tempfile.mkstemp(prefix=f".{pth.name}.", dir=pth.parent)
    try:
        with os.fdopen(fd, mode="w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, pth)
    except BaseException:
        pathlib.Path(tmp).unlink(missing_ok=True)
        raise

    return pth


def csv_text(columns: Iterable[str], rows: Iterable[Iterable[Any]]) -> str:
    """Render rows as CSV text under the schema header comment."""

    lines = [CSV_SCHEMA_HEADER.rstrip("\n"), ",".join(columns)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    return "\n".join(lines) + "\n"
