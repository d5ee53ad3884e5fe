"""Exception types shared by the kernels, cache, model and transport."""


class InferenceError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(InferenceError, ValueError):
    pass


class CapacityError(InferenceError):
    pass


class RangeError(InferenceError, IndexError):
    pass


class ConfigError(InferenceError, ValueError):
    pass


class ProtocolError(InferenceError):
    """A collective saw inconsistent inputs from its participants."""

    def __init__(self, message, workers=()):
        super().__init__(message)
        self.workers = tuple(workers)


class TransportError(InferenceError):
    pass


class ContentionError(InferenceError):
    """A communication slot was requested while already in flight."""


class CorrectnessError(InferenceError):
    """A benchmark correctness gate failed; the report is not emitted."""

    def __init__(self, message, check=None):
        super().__init__(message)
        self.check = check
