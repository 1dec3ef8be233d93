"""Exception hierarchy.

Everything derived from :class:`VisAnchorError` is an input or config
problem (CLI exit code 1). :class:`InvariantViolation` marks an internal
bug (exit code 2).
"""


class VisAnchorError(Exception):
    pass


class InvariantViolation(RuntimeError):
    pass


# tensorio
class TensorIOError(VisAnchorError, OSError):
    pass


class SizeMismatch(VisAnchorError):
    pass


class RankError(VisAnchorError):
    pass


class NonFinite(VisAnchorError):
    pass


class SchemaError(VisAnchorError):
    pass


class DimMismatch(VisAnchorError):
    pass


class MissingFile(VisAnchorError, FileNotFoundError):
    pass


# respmap / anchor / baseline
class EmptyText(VisAnchorError):
    pass


class InvalidRatio(VisAnchorError, ValueError):
    pass


class EmptyInstance(VisAnchorError):
    pass


class IndexOutOfRange(VisAnchorError, IndexError):
    pass


# codecode
class InvalidRedundancy(VisAnchorError, ValueError):
    pass


class InvalidDistribution(VisAnchorError, ValueError):
    pass


class ShapeMismatch(VisAnchorError):
    pass


# simlab / cli
class ConfigError(VisAnchorError):
    pass
