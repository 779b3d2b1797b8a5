"""Exception types shared across the package."""


class SmallNoiseError(Exception):
    pass


class InvalidInputError(SmallNoiseError, ValueError):
    """Raised when an argument fails a basic sanity check (non-finite, wrong shape, ...)."""


class DivergenceError(SmallNoiseError, RuntimeError):
    """Raised when an ensemble contains a path whose state became non-finite.

    ``path_indices`` lists the offending global path indices in increasing order.
    """

    def __init__(self, message, path_indices=()):
        super().__init__(message)
        self.path_indices = tuple(int(i) for i in path_indices)


class ConfigError(SmallNoiseError):
    """Invalid run configuration. ``errors`` holds every problem found, not just the first."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
