"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class ConfigurationError(ValueError):
    """The model or run configuration is missing a required piece."""


class ParseError(ValueError):
    """A data file is malformed; carries the 1-based offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyCorpusError(ValueError):
    """No cells survived filtering."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the loss trace up to the failure."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class NonFiniteGradientError(RuntimeError):
    """A parameter gradient contains NaN or infinity; names the parameter."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor shape disagrees with the manifest or the model."""


class CheckpointPayloadError(CheckpointError):
    """A tensor payload is truncated or has the wrong byte length."""
