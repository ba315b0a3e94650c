"""Exception types shared across the package."""


class DiamondSegError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(DiamondSegError, ValueError):
    pass


class MalformedPng(DiamondSegError, ValueError):
    pass


class TooManyClasses(DiamondSegError, ValueError):
    pass


class MissingFile(DiamondSegError, FileNotFoundError):
    pass


class DuplicateId(DiamondSegError, ValueError):
    pass


class FrameOutOfRange(DiamondSegError, IndexError):
    pass


class InvalidSpec(DiamondSegError, ValueError):
    pass


class EmptyInput(DiamondSegError, ValueError):
    pass


class EmptyRun(EmptyInput):
    pass


class NoForegroundPixels(DiamondSegError, ValueError):
    pass


class DatasetTooSmall(DiamondSegError, ValueError):
    pass


class InvalidParameter(DiamondSegError, ValueError):
    pass


class ShapeMismatch(DiamondSegError, ValueError):
    pass


class DegenerateBatch(DiamondSegError, ValueError):
    pass


class InvalidFactor(DiamondSegError, ValueError):
    pass


class ClassOutOfRange(DiamondSegError, ValueError):
    pass


class InvalidConfig(DiamondSegError, ValueError):
    pass


class EmptyDataset(DiamondSegError, ValueError):
    pass


class EmptyMatrix(DiamondSegError, ValueError):
    pass


class EmptyComponent(DiamondSegError, ValueError):
    pass


class MissingRegion(DiamondSegError, ValueError):
    pass


class DegenerateContour(DiamondSegError, ValueError):
    pass


class EmptyPool(DiamondSegError, ValueError):
    pass


class MissingPreannotations(DiamondSegError, ValueError):
    pass


class ExhaustedPool(DiamondSegError, RuntimeError):
    pass
