import os
import logging
import dataclasses

import torch
from dotenv import load_dotenv
from rapidfuzz import process, fuzz

from errors import ConfigError

load_dotenv()  # Load environment variables from .env if available

# Logging and runtime settings
LOG_LEVEL = os.getenv("LOG_LEVEL", "") or "INFO"
MNTP_THREADS = int(os.getenv("MNTP_THREADS", 0) or 1)

# Default locations for datasets and run outputs
MNTP_DATA_DIR = os.getenv("MNTP_DATA_DIR", "").strip() or "data"
MNTP_OUT_DIR = os.getenv("MNTP_OUT_DIR", "").strip() or "runs"

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"

logger = logging.getLogger(__name__)


def configure_logging(level: str = None):
    """Configure root logging once for a command-line process."""
    logging.basicConfig(format=LOG_FORMAT, level=(level or LOG_LEVEL).upper())


def apply_threads(threads: int = None):
    """Pin torch to a fixed thread count and deterministic kernels."""
    torch.set_num_threads(threads or MNTP_THREADS)
    torch.use_deterministic_algorithms(True)


def suggest(name: str, choices, threshold: int = 70):
    """
    Return the closest entry of ``choices`` to ``name`` using fuzzy matching,
    or None when nothing scores at least ``threshold``.
    """
    if not isinstance(name, str) or not choices:
        return None
    best_match = process.extractOne(name, list(choices), scorer=fuzz.ratio)
    if best_match and best_match[1] >= threshold:
        return best_match[0]
    return None


def unknown_key_message(key: str, section: str, choices) -> str:
    message = f"unknown key '{key}' in section '{section}'"
    hint = suggest(key, choices)
    if hint is not None:
        message += f"; did you mean '{hint}'?"
    return message


def _coerce(value, default, key: str, section: str):
    """Check a JSON value against the type of the field default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"'{section}.{key}' must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{section}.{key}' must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{section}.{key}' must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"'{section}.{key}' must be a string, got {value!r}")
        return value
    if default is None:
        return value
    raise ConfigError(f"'{section}.{key}' has an unsupported type")


def section_from_dict(cls, data: dict, section: str):
    """
    Build dataclass ``cls`` from a JSON object, rejecting unknown keys.

    Missing keys take the dataclass defaults.
    """
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section}' must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            logger.warning("Rejecting unknown config key %s.%s", section, key)
            raise ConfigError(unknown_key_message(key, section, fields))
    defaults = cls()
    values = {}
    for name in fields:
        if name in data:
            values[name] = _coerce(data[name], getattr(defaults, name), name, section)
    return cls(**values)


def section_to_dict(obj) -> dict:
    return dataclasses.asdict(obj)
