"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid model or layer configuration, caught at construction."""


class ShapeError(ValueError):
    """Operand shapes incompatible with an op."""


class GridError(ShapeError):
    """Token count does not match the requested patch grid."""


class FormatError(ValueError):
    """Malformed file header or payload."""
