"""Common base for errors raised by the cine_sr package."""
import enum


class ErrorCategory(enum.StrEnum):
    """Category printed by the CLI in front of an error message."""

    CONFIG = 'config'
    DATA = 'data'
    PIPELINE = 'pipeline'
    MODEL = 'model'
    CHECKPOINT = 'checkpoint'
    METRIC = 'metric'


class CineSrError(Exception):
    """Base class of all package errors."""

    category = ErrorCategory.PIPELINE


class ConfigError(CineSrError):
    """Invalid or unreadable configuration."""

    category = ErrorCategory.CONFIG
