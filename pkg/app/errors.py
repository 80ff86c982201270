"""Base exceptions; module-specific errors subclass these where they are raised."""


class SimulationError(Exception):
    """Base for every error the simulator reports at the CLI boundary."""
    pass


class ConfigurationError(SimulationError):
    """Raised when a model, preset or named sample is invalid."""
    pass
