"""
Exception hierarchy for the CvS pipeline.

Every error derives from ``CvsError`` and from the closest builtin, so
callers can catch either.
"""


class CvsError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(CvsError, ValueError):
    """Invalid configuration value, unknown key or out-of-range parameter."""


class DatasetLoadError(CvsError, OSError):
    """A dataset source is missing or cannot be parsed."""


class DatasetValidationError(CvsError, ValueError):
    """Dataset content violates an invariant (labels, masks, subset sizes)."""


class ShapeError(CvsError, ValueError):
    """Shape inference or forward pass mismatch."""


class MissingLabelsError(CvsError, ValueError):
    """Samples lack the label kind a method requires."""

    def __init__(self, message: str, sample_ids=None):
        super().__init__(message)
        self.sample_ids = list(sample_ids or [])


class PretrainedWeightsUnavailable(CvsError, FileNotFoundError):
    """Pretrained weights were requested but cannot be found."""


class TrainingDivergedError(CvsError, RuntimeError):
    """Loss became non-finite during training."""


class OutputLockedError(CvsError, RuntimeError):
    """Another invocation owns the output directory."""


class NonFiniteError(CvsError, RuntimeError):
    """Logits or losses contain NaN or infinite values."""
