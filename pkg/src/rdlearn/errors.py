"""Exception types raised across the package."""


class RdlError(Exception):
    """Base class for all package errors."""


class ShapeError(RdlError, ValueError):
    """Incompatible tensor or layer shapes."""


class NumericError(RdlError, ArithmeticError):
    """A NaN or Inf appeared in an activation, gradient or update."""


class DegenerateInputError(RdlError, ValueError):
    """Input for which the requested quantity is undefined (e.g. a constant vector under correlation)."""


class ConfigError(RdlError, ValueError):
    """One or more configuration constraints were violated.

    ``problems`` lists every violated constraint, not just the first.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class IdxFormatError(RdlError, ValueError):
    """Base class for malformed IDX files."""


class MagicMismatchError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class CheckpointError(RdlError, ValueError):
    pass
