"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value violates its invariants."""


class DomainError(ValueError):
    """An evaluation point lies outside the function's domain."""


class CapacityError(RuntimeError):
    """An enumeration or grid would exceed its configured cap."""


class ConstructionError(RuntimeError):
    """Inner-function construction could not be verified.

    Carries the offending rank and cube pair when available.
    """

    def __init__(self, message, rank=None, cube_pair=None):
        super().__init__(message)
        self.rank = rank
        self.cube_pair = cube_pair


class NumericalError(RuntimeError):
    """A linear solve failed or did not reach the required residual."""


class EmptyBasisError(ValueError):
    """Column pruning removed every basis function."""


class CacheMissingError(FileNotFoundError):
    """A required cache file does not exist."""


class CacheInvalidError(RuntimeError):
    """A cache file failed validation against the requesting config."""
