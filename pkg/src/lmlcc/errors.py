"""Exception taxonomy shared across the pipeline.

The CLI maps these onto exit codes: DataError -> 2, NumericalError -> 3,
ConfigError -> 1 (usage).
"""


class PipelineError(Exception):
    """Base class for all pipeline failures."""


class DataError(PipelineError):
    """Malformed, inconsistent, or missing input data."""


class ShapeError(DataError):
    """Array arguments with incompatible shapes."""


class ConfigError(PipelineError):
    """Invalid configuration value or flag combination."""


class NumericalError(PipelineError):
    """Non-finite values encountered during training or inference."""
