"""Exception types shared across the package."""


class PolykervError(Exception):
    """Base class for library errors."""


class ShapeError(PolykervError, ValueError):
    """Operand shapes do not conform."""


class ConfigurationError(PolykervError, ValueError):
    """A hyperparameter or layer configuration is invalid."""


class InputError(PolykervError, ValueError):
    """Runtime input data violates an operation's preconditions."""


class UsageError(PolykervError, ValueError):
    """An API was called in an unsupported way."""


class ConversionError(PolykervError, ValueError):
    """Network surgery hit a layer kind it does not know."""


class DataFormatError(PolykervError, ValueError):
    """A dataset file is corrupt or not in the expected format."""


class DivergenceError(PolykervError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, step: int, location: str):
        self.step = step
        self.location = location
        super().__init__(f"non-finite value at step {step} in {location}")
