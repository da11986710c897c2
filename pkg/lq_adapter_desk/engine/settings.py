"""Process-level settings read from environment variables."""

from __future__ import annotations

import logging
import os

from .errors import ConfigError


DEFAULT_LOG_LEVEL = "INFO"
DEFAULT_GRADCHECK_POINTS = 10


def get_log_level() -> int:
    """Return the logging level named by LQ_ADAPTER_LOG_LEVEL."""
    raw = os.getenv("LQ_ADAPTER_LOG_LEVEL", DEFAULT_LOG_LEVEL).strip().upper()
    level = logging.getLevelName(raw)
    if not isinstance(level, int):
        raise ConfigError(
            f"LQ_ADAPTER_LOG_LEVEL must be a logging level name, got {raw!r}"
        )
    return level


def get_gradcheck_points() -> int:
    """Number of sampled coordinates per parameter tensor during gradcheck."""
    raw = os.getenv("LQ_ADAPTER_GRADCHECK_POINTS", str(DEFAULT_GRADCHECK_POINTS)).strip()
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(
            f"LQ_ADAPTER_GRADCHECK_POINTS must be an integer, got {raw!r}"
        ) from exc
    if value < 1:
        raise ConfigError("LQ_ADAPTER_GRADCHECK_POINTS must be at least 1")
    return value
