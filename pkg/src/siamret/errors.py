"""Exception types shared across the package.

Every error carries a stable ``category`` string so the CLI can emit
machine-readable failures without parsing messages.
"""


class SiamretError(Exception):
    """Base class for all package errors."""

    category = "error"


class ValidationError(SiamretError):
    """A value or structure violates a documented precondition."""

    category = "validation"


class ShapeError(SiamretError):
    """Array shapes are incompatible with the requested operation."""

    category = "shape"


class NonFiniteError(SiamretError):
    """An input contains NaN or infinity."""

    category = "non_finite"


class FormatError(SiamretError):
    """A binary or text artifact does not match its declared format."""

    category = "format"


class ConfigError(SiamretError):
    """A run configuration file or override is malformed."""

    category = "config"


class RadiusEstimationError(SiamretError):
    """No usable field-of-view could be estimated from an image."""

    category = "radius_estimation"
