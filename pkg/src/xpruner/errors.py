"""Exception hierarchy shared across the package."""


class XPrunerError(Exception):
    """Base class for all package errors."""


class ShapeError(XPrunerError, ValueError):
    pass


class NonFiniteError(XPrunerError, FloatingPointError):
    """A primitive produced NaN or Inf."""

    def __init__(self, op: str, message: str | None = None):
        self.op = op
        super().__init__(message or f"{op} produced non-finite values")


class TapeError(XPrunerError, RuntimeError):
    pass


class ConfigError(XPrunerError, ValueError):
    """Invalid model or run configuration. ``field`` names the offending key."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(message)


class DegenerateArchitectureError(XPrunerError, ValueError):
    """A pruning request would leave a layer without heads or neurons."""


class FrozenWeightsError(XPrunerError, RuntimeError):
    pass


class NonFiniteLossError(XPrunerError, FloatingPointError):
    def __init__(self, term: str, value: float):
        self.term = term
        self.value = value
        super().__init__(f"loss term {term!r} is non-finite ({value})")


class NonConvergenceError(XPrunerError, RuntimeError):
    def __init__(self, achieved: float, target: float, steps: int):
        self.achieved = achieved
        self.target = target
        self.steps = steps
        super().__init__(
            f"threshold search did not converge after {steps} steps: R={achieved:.6f}, alpha={target:.6f}"
        )


class IdxFormatError(XPrunerError, ValueError):
    """Malformed IDX file. Carries the file path and byte offset of the problem."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path} @ byte {offset}: {message}")


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class CheckpointError(XPrunerError, IOError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class PipelineOrderError(XPrunerError, RuntimeError):
    """A pipeline stage received a checkpoint from the wrong stage."""
