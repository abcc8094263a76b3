"""Exception types shared across the package."""


class SSPNetError(Exception):
    """Base class for package errors."""


class DimensionError(SSPNetError, ValueError):
    """Operand shapes do not line up."""


class GeometryError(SSPNetError, ValueError):
    """A spatial configuration leaves no valid output positions."""


class DataError(SSPNetError, ValueError):
    """Input records are inconsistent (unknown ids, malformed boxes...)."""


class CheckpointError(SSPNetError):
    """A checkpoint cannot be loaded into the requested model."""
