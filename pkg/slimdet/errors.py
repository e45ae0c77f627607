class SlimDetError(Exception):
    """Base class for every error the engine raises on purpose."""

    exit_code = 2


class UsageError(SlimDetError):
    """Bad command line usage."""

    exit_code = 1


class ConfigError(SlimDetError):
    """Invalid configuration value; the message names the offending key."""

    exit_code = 1


class ShapeError(SlimDetError, ValueError):
    """Tensor or graph shapes that do not fit together."""

    exit_code = 2


class FormatError(SlimDetError):
    """Corrupt or inconsistent dataset/checkpoint files."""

    exit_code = 2

    def __init__(self, message: str, path: str = None):
        self.path = path
        if path:
            message = f"{path}: {message}"
        super().__init__(message)


class NumericalError(SlimDetError):
    """Non-finite values in a computation."""

    exit_code = 3

    def __init__(self, message: str, step: int = None, index=None):
        self.step = step
        self.index = index
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
