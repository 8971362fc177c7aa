# app/utils/logger.py

from __future__ import annotations
import logging
import sys

from app.core.config import LOG_LEVEL

_LOGGERS: dict[str, logging.Logger] = {}
_LEVEL = LOG_LEVEL


def get_logger(name: str) -> logging.Logger:
    """
    Central logger factory.
    Ensures consistent formatting across the lab.
    """

    logger = logging.getLogger(name)

    if logger.handlers:
        return logger  # Prevent duplicate handlers

    logger.setLevel(_LEVEL)

    handler = logging.StreamHandler(sys.stdout)
    formatter = logging.Formatter(
        fmt="%(asctime)s | %(levelname)s | %(name)s | %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    handler.setFormatter(formatter)

    logger.addHandler(handler)
    logger.propagate = False
    _LOGGERS[name] = logger

    return logger


def set_log_level(level: str) -> None:
    """Applies the run-config level to every logger handed out so far."""
    global _LEVEL
    _LEVEL = level.upper()
    for logger in _LOGGERS.values():
        logger.setLevel(_LEVEL)
