"""Exception types shared across the toolkit."""


class ChainError(ValueError):
    """The joint set does not form a usable kinematic tree."""


class ConfigError(ValueError):
    """A configuration value is missing, out of range, or inconsistent."""


class ParseError(ValueError):
    """A file could not be parsed; carries the offending line when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FitDivergedError(RuntimeError):
    """Optimization produced a non-finite loss."""

    def __init__(self, message, iteration):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration
