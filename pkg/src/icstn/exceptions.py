"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Inconsistent shapes, layer arithmetic or experiment settings."""


class DegenerateWarpError(ValueError):
    """A warp matrix could not be normalized, inverted or applied."""


class IllConditionedError(ValueError):
    """A linear system was singular (or too close to it) to be solved."""


class DataFormatError(ValueError):
    """Malformed dataset or checkpoint file, or labels out of range."""
