"""Exception hierarchy shared by the library and the CLI."""

from __future__ import annotations


class ForecastError(Exception):
    """Base class for every error raised on purpose by this package."""

    exit_code = 1


class InputError(ForecastError):
    """Bad data, shapes or arguments supplied by the caller."""

    exit_code = 2


class DimensionError(InputError):
    """Array shapes do not line up."""


class DatasetFormatError(InputError):
    """A dataset file line could not be parsed."""

    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        prefix = f"line {line_number}: " if line_number is not None else ""
        super().__init__(prefix + message)


class SplitOverlapError(InputError):
    """Evaluation scenes overlap the scenes a checkpoint was trained on."""


class ReencodeRequired(InputError):
    """Online state cannot be advanced; the caller has to re-encode from scratch."""


class ConfigurationError(ForecastError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class ParameterizationError(ForecastError):
    """A distribution parameter is outside its valid domain."""

    exit_code = 3


class CheckpointError(ForecastError):
    """Checkpoint container is unreadable or does not match the model."""

    exit_code = 2


class TapeError(ForecastError):
    """Misuse of a computation tape."""


class NumericalError(ForecastError):
    """Non-finite values appeared during optimisation."""

    exit_code = 3
