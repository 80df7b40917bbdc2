"""Reading experiment configurations (TOML or JSON)."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .exceptions import ConfigError

__all__ = ["read_config", "content_hash", "as_matrix", "as_vector", "shipped_config"]


def read_config(path) -> dict:
    """Parse a TOML file (or JSON when the suffix is ``.json``)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    if path.suffix.lower() == ".json":
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"{path}: invalid JSON (line {exc.lineno}, column {exc.colno}): {exc.msg}"
            ) from exc
    try:
        return tomllib.loads(raw.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 text") from exc


def content_hash(path) -> str:
    """SHA-1 of the file framed as a git blob, as ``git hash-object`` prints."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def shipped_config(name: str) -> Path:
    """Path of a configuration bundled with the package (``sysrisk``, ``crowd``)."""
    path = Path(__file__).parent / "configs" / f"{name}.toml"
    if not path.exists():
        raise ConfigError(f"no shipped config named {name!r}")
    return path


def as_matrix(value, shape=None, name="matrix") -> np.ndarray:
    """Accept a nested array, a scalar, or ``{shape = [...], data = [...]}`` (row-major)."""
    try:
        if isinstance(value, dict):
            arr = np.asarray(value["data"], dtype=float).reshape(value["shape"])
        else:
            arr = np.asarray(value, dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: cannot read matrix ({exc})") from exc
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1 and shape is not None and len(shape) == 2:
        arr = arr.reshape(shape)
    if shape is not None and arr.shape != tuple(shape):
        raise ConfigError(f"{name}: expected shape {tuple(shape)}, got {arr.shape}")
    return arr


def as_vector(value, size=None, name="vector") -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float)).ravel()
    if size is not None and arr.shape != (size,):
        raise ConfigError(f"{name}: expected length {size}, got {arr.shape[0]}")
    return arr
