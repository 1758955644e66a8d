"""Exception hierarchy shared by every module."""


class SatenError(Exception):
    """Base class for all library errors."""


class ShapeError(SatenError, ValueError):
    pass


class ParameterError(SatenError, ValueError):
    pass


class InfeasibleFactorizationError(ParameterError):
    """Raised when an integer has no factorization of the requested length."""

    def __init__(self, n, num_factors, side=None):
        self.n = n
        self.num_factors = num_factors
        self.side = side
        where = f"{side} dimension " if side else ""
        super().__init__(
            f"{where}{n} has no factorization into {num_factors} factors >= 2"
        )


class DataError(SatenError, ValueError):
    pass


class FormatError(SatenError):
    """Malformed or inconsistent on-disk bundle."""


class ConfigError(SatenError):
    pass
