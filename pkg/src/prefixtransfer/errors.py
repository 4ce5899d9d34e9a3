"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericsError -> 4.
"""


class PrefixTransferError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PrefixTransferError, ValueError):
    """Invalid configuration value or unknown config key."""


class ShapeError(PrefixTransferError, ValueError):
    """Tensor shapes incompatible with the requested operation."""


class StateError(PrefixTransferError, RuntimeError):
    """Operation applied in the wrong order (e.g. double backward)."""


class NumericsError(PrefixTransferError, ArithmeticError):
    """An operation produced NaN/Inf from finite inputs."""


class CompatibilityError(PrefixTransferError, RuntimeError):
    """Checkpoint does not fit the model it is being loaded into."""


class DataError(PrefixTransferError, ValueError):
    """Corpus or dataset problem."""


class IngestionError(DataError):
    """Malformed input file; carries (line number, reason) pairs."""

    def __init__(self, path, problems):
        self.path = str(path)
        self.problems = list(problems)
        detail = "; ".join(f"line {n}: {why}" for n, why in self.problems)
        super().__init__(f"{self.path}: {detail}")


class MiniLangError(DataError):
    """Mini-language runtime error (e.g. variable read before assignment)."""


class TrainingAborted(NumericsError):
    """Training stopped on a non-finite loss; carries the partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
