"""Exception hierarchy shared by all dforge modules."""


class DforgeError(Exception):
    """Base class for all errors raised by this package."""


class GeometryError(DforgeError):
    """Invalid geometry: degenerate triangles, inverted orientation, bad extents."""


class MeshFormatError(DforgeError):
    """Malformed mesh file.

    Parameters
    ----------
    message : str
        Description of the problem.
    line : int, optional
        1-based line number in the offending file, if known.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class LocationError(DforgeError):
    """A query point lies outside the mesh (beyond tolerance)."""


class CoefficientError(DforgeError):
    """A material coefficient is invalid (wrong sign, wrong shape, non-finite)."""


class DimensionMismatchError(DforgeError):
    """Array sizes inconsistent with the mesh or model at hand."""


class SolverError(DforgeError):
    """A linear solve failed or left an unacceptable residual."""


class ProjectionError(DforgeError):
    """Inter-mesh transfer failed (uncovered quadrature point, singular Gram matrix)."""


class ConfigError(DforgeError):
    """Invalid run configuration."""


class CoverageError(DforgeError):
    """A sample-index set violates its required coverage properties."""


class MetricError(DforgeError):
    """An error metric could not be evaluated (zero reference, mismatched grids)."""
