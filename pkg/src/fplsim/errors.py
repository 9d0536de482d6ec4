"""Exception hierarchy shared by every fplsim module."""


class FplsimError(Exception):
    """Base class for all errors raised by fplsim."""


class ConfigurationError(FplsimError, ValueError):
    """A shape, graph, placement or experiment setting is inconsistent."""


class DataError(FplsimError, ValueError):
    """Input data (labels, pixel arrays) violates a documented range."""


class UsageError(FplsimError, RuntimeError):
    """An API was called in a state where it cannot run (e.g. no gradient)."""


class DomainError(FplsimError, ValueError):
    """A numeric argument lies outside the function's domain."""


class IngestionError(FplsimError):
    """Raised while parsing IDX files. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, path: str = "", offset: int = 0):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: {message} (byte offset {offset})")


class WrongMagicError(IngestionError):
    pass


class TruncatedFileError(IngestionError):
    pass


class DimensionMismatchError(IngestionError):
    pass
