"""Exceptions and warnings raised across the package."""


class EhmError(Exception):
    pass


class InfeasiblePartition(EhmError, ValueError):
    pass


class OutOfRangeTemperature(EhmError, ValueError):
    pass


class SingularSystem(EhmError, RuntimeError):
    pass


class NonPhysicalDensity(EhmError, ValueError):
    pass


class NoConvergence(EhmError, RuntimeError):
    def __init__(self, message, increment=None):
        super().__init__(message if increment is None else f"{message} (increment {increment})")
        self.increment = increment


class NoPairs(EhmError, ValueError):
    pass


class InfeasibleBounds(EhmError, ValueError):
    pass


class FormatError(EhmError, ValueError):
    pass


class ClampHit(RuntimeWarning):
    """Slip-rate exponent exceeded the overflow guard and was clamped."""
