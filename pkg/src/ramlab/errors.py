"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or argument value."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation expects."""


class NumericalDomainError(ArithmeticError):
    """A quantity left the range where the computation is defined."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, message: str = "non-finite loss or gradient"):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step
