"""Exception hierarchy shared by all specden modules."""


class SpecdenError(Exception):
    """Base class for every error raised by specden."""


class DimensionMismatchError(SpecdenError, ValueError):
    pass


class ContainerError(SpecdenError):
    pass


class MagicMismatchError(ContainerError):
    pass


class CorruptHeaderError(ContainerError):
    pass


class NoLinesInRangeError(SpecdenError, ValueError):
    pass


class AllZeroMatrixError(SpecdenError, ValueError):
    pass


class NonFiniteInputError(SpecdenError, ValueError):
    pass


class ChannelMismatchError(SpecdenError, ValueError):
    pass


class TooFewComponentsError(SpecdenError, ValueError):
    pass


class DegenerateScoresError(SpecdenError, ValueError):
    pass


class NoNoiseDomainError(SpecdenError):
    pass


class SparseInputError(SpecdenError):
    """Anisotropy selection refused on sparse, unfiltered data."""


class ComponentRangeError(SpecdenError, ValueError):
    pass


class EmptyWindowError(SpecdenError, ValueError):
    pass


class SpecParseError(SpecdenError, ValueError):
    pass


class StageError(SpecdenError):
    """Wraps a failure inside a named pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
