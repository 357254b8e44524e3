"""Exception hierarchy.

``DataError`` covers malformed inputs (bad files, broken invariants, shape
mismatches); ``NumericError`` covers non-finite values during computation.
The CLI maps the two families onto distinct exit codes.
"""


class LgsegError(Exception):
    pass


class DataError(LgsegError, ValueError):
    pass


class NumericError(LgsegError, ArithmeticError):
    pass


class IoError(LgsegError, OSError):
    pass


class FormatError(DataError):
    pass


class SceneInvariantError(DataError):
    pass


class DimensionError(DataError):
    pass


class CatalogSizeError(DataError):
    pass


class SplitSizeError(DataError):
    pass


class CatalogCountTooSmall(DataError):
    pass


class EmbeddingCoverageError(DataError):
    pass


class DegenerateEmbeddingError(DataError):
    pass


class PcaRankError(DataError):
    pass


class NegativeSamplingError(DataError):
    pass
