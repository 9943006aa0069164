"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or parameter set."""


class StabilityError(ValueError):
    """A time step violates an integrator stability/accuracy bound."""


class NumericalAbort(RuntimeError):
    """Closed-loop run diverged (runaway gain without saturation headroom)."""

    def __init__(self, message, last_stable_time=None):
        super().__init__(message)
        self.last_stable_time = last_stable_time


class CalibrationError(RuntimeError):
    """A calibration routine could not produce a trustworthy estimate."""
