"""Exception types shared across the package."""


class CvlmError(Exception):
    pass


class ShapeError(CvlmError, ValueError):
    pass


class ConfigError(CvlmError, ValueError):
    pass


class TruncationError(CvlmError, ValueError):
    """A sequence would exceed the model's positional budget."""


class CapacityError(CvlmError, ValueError):
    """A requested world or split cannot be built from the given sizes."""


class ParseError(CvlmError, ValueError):
    pass


class FormatError(CvlmError, ValueError):
    """Bad magic, version or structure in a binary container."""


class IntegrityError(CvlmError, ValueError):
    """A checkpoint tensor payload is truncated or corrupted."""


class DependencyError(CvlmError, RuntimeError):
    """A training stage was started without its prerequisite checkpoint."""


class NonFiniteError(CvlmError, FloatingPointError):
    pass


class MergeError(CvlmError, RuntimeError):
    pass
