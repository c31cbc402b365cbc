"""Exception hierarchy shared by all kernelbank modules."""


class KernelBankError(Exception):
    """Base class for package errors."""


class CholeskyFailure(KernelBankError, ArithmeticError):
    """Covariance matrix stayed indefinite after the maximum diagonal jitter."""


class FitDegenerate(KernelBankError, ArithmeticError):
    """Every hyperparameter restart failed to produce a factorizable covariance."""


class DataError(KernelBankError, ValueError):
    """Input data violates a trip or trajectory invariant."""


class SchemaError(DataError):
    """A trip CSV does not match one of the accepted column layouts."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class TooShort(DataError):
    """Trajectory has fewer samples than two training windows."""


class GapTooLarge(DataError):
    """Sample spacing exceeds the gap limit; the trip must be split."""


class InsufficientHistory(DataError):
    """Not enough samples before (or after) the prediction start."""


class Empty(KernelBankError, ValueError):
    """Statistics requested over an empty collection."""


class ConfigError(KernelBankError, ValueError):
    """Invalid run configuration."""
