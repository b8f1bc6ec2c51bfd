"""Exception hierarchy shared by all modules."""


class BonnError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(BonnError, ValueError):
    """Shapes or lengths of operands do not line up."""


class DomainError(BonnError, ValueError):
    """A numeric argument is outside its admissible range."""


class NonFiniteError(BonnError, FloatingPointError):
    """NaN or Inf found where finite values are required."""


class UninitializedStateError(BonnError, RuntimeError):
    """Running statistics were requested before any were accumulated."""


class FormatError(BonnError, ValueError):
    """A binary file does not follow the expected layout.

    ``offset`` is the byte position where parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(BonnError, ValueError):
    """An architecture description is internally inconsistent."""

    def __init__(self, message: str, layer_index: int | None = None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class TrainingError(BonnError, FloatingPointError):
    """A gradient or parameter went non-finite during training."""

    def __init__(self, message: str, layer: str | None = None, step: int | None = None):
        super().__init__(f"{message} [layer={layer}, step={step}]")
        self.layer = layer
        self.step = step


class LabelError(BonnError, IndexError):
    """A class label falls outside ``[0, num_classes)``."""
