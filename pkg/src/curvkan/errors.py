"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad grid, unknown target, inconsistent widths."""


class ShapeError(ValueError):
    """Input array dimensions do not match the network."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared; ``location`` says where."""

    def __init__(self, message, location=None):
        super().__init__(message if location is None else f"{message} at {location}")
        self.location = location


class DivergenceError(NumericalError):
    """Training objective blew up; ``epoch`` is the epoch it happened in."""

    def __init__(self, epoch, value):
        super().__init__(f"training diverged (objective={value!r})", location=f"epoch {epoch}")
        self.epoch = epoch
        self.value = value
