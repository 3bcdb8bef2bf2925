"""Exception hierarchy.

Everything raised for bad input data derives from :class:`DataError` so the
CLI can map it to exit code 2 in one place.
"""


class DataError(Exception):
    """Input data or configuration is invalid."""


class FormatError(DataError):
    """A file does not follow its on-disk format."""


class ParseError(FormatError):
    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class ValidationError(DataError):
    """Parsed data violates a domain invariant."""


class ConfigError(DataError):
    """A configuration value is out of range or inconsistent."""


class NoNeighborError(DataError):
    """Nearest-neighbour search has no candidate to return."""


class StaleCacheError(RuntimeError):
    """A forward cache was used after the parameters it saw were updated."""


class TrainingError(RuntimeError):
    def __init__(self, epoch, step, message):
        self.epoch = epoch
        self.step = step
        super().__init__(f"epoch {epoch}, step {step}: {message}")
