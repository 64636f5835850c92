"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (usage -> 2, numerical -> 3,
io/parse -> 4); library code raises them directly.
"""


class SpatialScaleError(Exception):
    """Base class for all package-specific errors."""


class DesignError(SpatialScaleError, ValueError):
    """Invalid sampling design or degenerate regression design matrix."""


class NumericalError(SpatialScaleError, RuntimeError):
    """A numerical procedure failed (factorization, calibration, optimizer)."""


class InputError(SpatialScaleError, ValueError):
    """Malformed external input (CSV parsing, config files)."""
