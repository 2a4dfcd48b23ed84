"""Exception types shared across the engine."""


class XMAdapterError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(XMAdapterError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateInputError(XMAdapterError, ValueError):
    """An input is degenerate (e.g. an all-zero row where a norm is needed)."""


class BundleError(XMAdapterError):
    """Base class for embedding-bundle load/save failures."""


class BadMagicError(BundleError):
    """The file does not start with the expected magic bytes."""


class UnsupportedVersionError(BundleError):
    """The file declares a format version this reader does not support."""


class TruncatedFileError(BundleError):
    """The file ends before the declared payload is complete."""


class BundleValidationError(BundleError):
    """The decoded bundle violates a structural invariant."""


class LabelRangeError(BundleValidationError):
    """A label is outside [0, num_classes)."""


class ZeroFeatureRowError(BundleValidationError):
    """A feature row is all zeros."""


class MissingClassError(BundleValidationError):
    """Some class has no training example."""


class InsufficientSamplesError(XMAdapterError, ValueError):
    """A class has fewer training examples than the requested shot count."""


class TrainingDivergenceError(XMAdapterError, RuntimeError):
    """Training produced a non-finite loss or runaway parameters."""

    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(f"{message} (epoch {epoch}, step {step})")
        self.epoch = epoch
        self.step = step


class EvaluationError(XMAdapterError, ValueError):
    """Evaluation was requested on an empty or inconsistent input."""
