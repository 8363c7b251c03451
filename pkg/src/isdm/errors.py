"""Exception types shared across the package."""


class EngineError(Exception):
    """Base class for errors raised by this package."""


class MeshError(EngineError):
    """Invalid or degenerate triangulation input/state."""


class OutsideDomainError(MeshError):
    """A query point lies outside the triangulated domain.

    Carries the offending points so callers can report which records
    to drop or reject.
    """

    def __init__(self, message, points=None):
        super().__init__(message)
        self.points = points


class DataError(EngineError):
    """Malformed or inconsistent input data (CSV rows, GeoJSON, truth files)."""

    def __init__(self, message, row=None, path=None):
        super().__init__(message)
        self.row = row
        self.path = path


class ConfigError(EngineError):
    """Configuration file violates the published schema or is self-inconsistent."""


class SpecError(EngineError):
    """Model specification references components that do not exist or conflict."""


class NumericsError(EngineError):
    """Numerical failure (e.g. a Cholesky factorization that should succeed)."""
