"""Exception types shared across the toolkit."""


class FlmipError(Exception):
    pass


class DimensionError(FlmipError, ValueError):
    """Shapes of inputs do not match the declared dimensions."""


class DataError(FlmipError, ValueError):
    """Training data is unusable (e.g. non-finite target sample)."""


class NetworkFormatError(FlmipError, ValueError):
    """A serialized network file is malformed."""


class ConfigurationError(FlmipError, ValueError):
    """A scenario or controller configuration is inconsistent."""


class SingularityError(FlmipError, ValueError):
    """The linearizing map was evaluated too close to a singularity."""

    def __init__(self, msg, zeta=None):
        super().__init__(msg)
        self.zeta = zeta


class GeometryError(FlmipError, ValueError):
    """Degenerate geometry (e.g. state exactly at the obstacle center)."""


class DomainError(FlmipError, ValueError):
    """A search/validation domain is invalid for the requested operation."""


class SolverError(FlmipError, RuntimeError):
    """The convex relaxation backend failed numerically."""


class TooManyBinariesError(FlmipError, ValueError):
    """Brute-force enumeration refused: binary count over the cap."""
