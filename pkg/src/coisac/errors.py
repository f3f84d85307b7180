"""Exception types raised across the package."""


class CoisacError(Exception):
    """Base class for all package errors."""


class ConfigError(CoisacError):
    """Invalid or unparsable scene configuration."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        parts = [message]
        if field is not None:
            parts.append(f"field={field}")
        if line is not None:
            parts.append(f"line={line}")
        super().__init__(" ".join(parts))


class DegenerateGeometryError(CoisacError):
    """Target colocated with a base station (zero range)."""


class DimensionError(CoisacError):
    """Tensor shapes disagree with the scene numerology."""


class DegenerateMessageError(CoisacError):
    """A tabulated message vanished numerically (all -inf)."""


class DegenerateGainError(CoisacError):
    """The unit-RCS model has (numerically) zero energy."""


class RankDeficiencyError(CoisacError):
    """Least-squares system without a unique solution."""


class GridCoverageError(CoisacError):
    """A search grid fails to cover the configured scene box."""


class OverheadOrderingError(CoisacError):
    """Overhead counters violate the expected method ordering."""
