"""Exception hierarchy shared by all modules."""


class CFAttribError(Exception):
    """Base class for every error raised by this package."""


class GraphError(CFAttribError, ValueError):
    pass


class CycleDetected(GraphError):
    pass


class DanglingParent(GraphError):
    pass


class MultipleSinks(GraphError):
    pass


class InvalidNode(GraphError):
    pass


class DataError(CFAttribError, ValueError):
    pass


class InsufficientHistory(DataError):
    pass


class InsufficientData(DataError):
    pass


class MissingColumn(DataError):
    pass


class EmptyInput(DataError):
    pass


class NonPositiveVolume(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class GapInDays(DataError):
    pass


class SingularDesign(CFAttribError, ValueError):
    """The design matrix of a linear fit has constant or collinear columns."""


class DimensionMismatch(CFAttribError, ValueError):
    pass


class TooManyInputs(CFAttribError, ValueError):
    pass


class UnmappedInput(CFAttribError, KeyError):
    pass


class DegenerateSelection(CFAttribError, ValueError):
    pass


class StageError(CFAttribError):
    """Wraps a failure in one pipeline stage so the CLI can name the stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
