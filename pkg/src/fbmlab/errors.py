"""Exception types shared across the package."""


class FbmLabError(Exception):
    """Base class for errors raised by fbmlab."""


class DomainError(FbmLabError, ValueError):
    """An argument lies outside the region where the operation is defined."""


class RegimeError(FbmLabError, ValueError):
    """The Hurst index is in the wrong regime for the requested operation."""


class DegenerateGridError(FbmLabError, ValueError):
    """A covariance or Gram matrix failed to factorize."""


class GridMismatchError(FbmLabError, ValueError):
    """Two paths or a path and a grid are not compatible."""


class PreconditionError(FbmLabError, ValueError):
    """Inputs violate a stated precondition, so the result would not be valid."""


class EllipticityError(FbmLabError, ValueError):
    """Vector fields leave the declared ellipticity band."""


class DivergenceError(FbmLabError, RuntimeError):
    """A solver left the configured state bound."""


class ConfigError(FbmLabError, ValueError):
    """Malformed or unknown configuration entries."""
