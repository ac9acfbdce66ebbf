"""Exception types shared across the package."""


class EdgePromptError(Exception):
    """Base class for all package errors."""


class ConfigurationError(EdgePromptError):
    """Invalid configuration value (bad dimension, singular matrix, ...)."""


class SplitError(EdgePromptError):
    """Few-shot split cannot be constructed as requested."""


class SamplingError(EdgePromptError):
    """Requested batch exceeds the available pool."""


class ShapeError(EdgePromptError):
    """Tensor dimensions do not match the encoder/prompt configuration."""


class ContractError(EdgePromptError):
    """A caller violated an operation's precondition."""


class NumericError(EdgePromptError):
    """Numerically undefined input (zero-norm vector, non-finite value)."""


class DeserializationError(EdgePromptError):
    """Malformed upload file or checkpoint; message names the bad field."""


class TrainingAbort(EdgePromptError):
    """Training stopped on a non-finite loss; carries the diagnostic record."""

    def __init__(self, message: str, record: dict | None = None):
        super().__init__(message)
        self.record = record or {}
