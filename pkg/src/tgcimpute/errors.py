"""Exception hierarchy shared across the package."""


class TgcImputeError(Exception):
    """Base class for all errors raised by tgcimpute."""


class ParseError(TgcImputeError):
    """Malformed input file (message names the offending line)."""


class BoundsError(TgcImputeError):
    """An index is outside its declared range."""


class ConflictError(TgcImputeError):
    """Two input records claim the same cell."""


class DomainError(TgcImputeError):
    """A numeric argument is outside the mathematical domain of an operation."""


class ShapeError(TgcImputeError):
    """Array dimensions do not line up."""


class ContractError(TgcImputeError):
    """A caller-facing precondition was violated."""


class FitError(TgcImputeError):
    """Model fitting failed on the supplied data."""


class NumericalError(TgcImputeError):
    """A numerical routine failed beyond the configured recovery attempts."""


class ConfigError(TgcImputeError):
    """An invalid configuration value was supplied."""
