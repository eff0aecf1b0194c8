class ConfigurationError(ValueError):
    """Inconsistent resolutions, grids or config values."""


class NumericalError(RuntimeError):
    """A numerical routine failed (factorization, quadrature, bracketing)."""
