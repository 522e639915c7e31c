"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad field values, malformed specs, missing files."""


class ShapeError(ValueError):
    """Array shapes incompatible with the requested operation."""


class InputError(ValueError):
    """Invalid runtime input data, e.g. non-finite signals."""


class NumericError(RuntimeError):
    """Non-finite values where finite results are guaranteed."""


class CheckpointError(RuntimeError):
    """Malformed, truncated, or unsupported checkpoint container."""
