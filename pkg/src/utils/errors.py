"""Exception hierarchy shared by every openworld-kit module."""


class OpenWorldError(Exception):
    """Base class for all errors raised by openworld-kit."""


class ConfigError(OpenWorldError, ValueError):
    pass


class ZeroVector(OpenWorldError, ValueError):
    pass


class EmptyRegistry(OpenWorldError, ValueError):
    pass


class DegenerateMean(OpenWorldError, ValueError):
    """Known-class embeddings cancel out, so w_U has no direction to subtract."""


class DuplicateClass(OpenWorldError, ValueError):
    pass


class InvalidSchedule(OpenWorldError, ValueError):
    pass


class ShapeMismatch(OpenWorldError, ValueError):
    pass


class DegenerateProjection(OpenWorldError, ValueError):
    """A projected location has zero norm before the final L2 normalization."""


class NoSamples(OpenWorldError, ValueError):
    pass


class NoModules(OpenWorldError, ValueError):
    pass


class EmptyScores(OpenWorldError, ValueError):
    pass


class SourceOutOfRange(OpenWorldError, IndexError):
    pass


class InfeasibleSpec(OpenWorldError, RuntimeError):
    pass


class UndefinedOperatingPoint(OpenWorldError, ValueError):
    pass


class MissingCheckpoint(OpenWorldError, FileNotFoundError):
    pass


class ParseError(OpenWorldError, ValueError):
    def __init__(self, path: str, line_no: int, message: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")
