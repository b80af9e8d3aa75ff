"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid counts, hyperparameters, or run configuration."""


class DimensionError(ValueError):
    """Array shapes that do not match the network or parameter layout."""


class RasterFormatError(ValueError):
    """Malformed, truncated, or non-binary spike raster file."""
