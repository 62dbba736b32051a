class LPAError(ValueError):
    """Base class for errors raised by lpa_lab."""


class DimensionError(LPAError):
    """Array shapes do not line up with the network."""

    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


class ConfigError(LPAError):
    """A configuration value is missing, malformed, or violates an invariant."""

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class EmptyClassError(LPAError):
    """A class-level perturbation was requested for a class with no samples."""


class InvariantViolation(AssertionError):
    """A runtime invariant check failed during training."""
