"""Error taxonomy shared across the package; the CLI maps these to exit
codes (config 2, data 3, numerical 4, non-convergence 5)."""


class ConfigError(ValueError):
    """Invalid or unknown configuration."""


class DataError(ValueError):
    """Dataset violates a marginal/support contract."""


class NumericalError(ArithmeticError):
    """A numerical procedure failed beyond recoverable precision."""


class ConvergenceError(RuntimeError):
    """An iterative procedure failed to converge."""
