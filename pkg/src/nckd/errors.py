"""Exception hierarchy shared across the package."""


class NckdError(Exception):
    """Base class for all package errors."""


class ContractError(NckdError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DimensionError(ContractError):
    """Array shapes or dimensions are incompatible."""


class NumericError(NckdError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DegenerateInputError(NckdError, ValueError):
    """Input is well-formed but geometrically degenerate (zero norm, empty class, ...)."""


class DegenerateCentroidError(DegenerateInputError):
    """A centered class mean has zero norm, so its normalized centroid is undefined."""

    def __init__(self, cls, message=None):
        self.cls = cls
        super().__init__(message or f"class {cls}: centered class mean has zero norm")


class TrainingDivergedError(NckdError, RuntimeError):
    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged (non-finite loss) in epoch {epoch}")


class DataCoverageError(NckdError, RuntimeError):
    """A class was never observed by the centroid tracker after the first epoch."""


class ParseError(NckdError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(NckdError, ValueError):
    """Run configuration failed schema validation."""
