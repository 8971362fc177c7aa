# app/core/errors.py

from __future__ import annotations

from app.core.constants import (
    CATEGORY_CONFIG,
    CATEGORY_GENERATION,
    CATEGORY_NUMERIC,
    CATEGORY_STORAGE,
    CATEGORY_VALIDATION,
)


class ScordError(Exception):
    """Base class for every failure the lab reports on purpose."""

    category = "error"


class ConfigError(ScordError, ValueError):
    category = CATEGORY_CONFIG


class InputValidationError(ScordError, ValueError):
    category = CATEGORY_VALIDATION


class NumericError(ScordError, ArithmeticError):
    category = CATEGORY_NUMERIC


class GenerationError(ScordError, RuntimeError):
    category = CATEGORY_GENERATION


class StorageError(ScordError, OSError):
    category = CATEGORY_STORAGE
