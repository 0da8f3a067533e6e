"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class BehindCameraError(DomainError):
    pass


class ConfigurationError(ValueError):
    """Invalid or degenerate configuration (bad key, degenerate gravity, ...)."""


class EmptyScanError(ValueError):
    pass


class ShapeError(ValueError):
    """Tensor shapes are incompatible for the requested op."""


class UndefinedLossError(ValueError):
    """A loss was requested over an empty mask."""


class UndefinedMetricsError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A gradient or loss became NaN/inf."""
