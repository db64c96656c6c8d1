"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, data problems with 3 and numeric failures with 4.
"""


class PartPromptError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(PartPromptError, ValueError):
    """A run configuration or CLI flag combination is invalid. Exit code 2."""


class DataValidationError(PartPromptError, ValueError):
    """On-disk data violates the manifest contract. Exit code 3."""


class SamplingError(DataValidationError):
    """An episode cannot be drawn from the requested partition."""


class NumericsError(PartPromptError, RuntimeError):
    """A non-finite value surfaced during training or evaluation. Exit code 4."""


class NotFittedError(PartPromptError, RuntimeError):
    """The estimator was used before ``fit`` (or loading a checkpoint)."""
