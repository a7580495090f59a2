"""Exception types shared across the package."""


class CrossedMFVBError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(CrossedMFVBError):
    """Inputs have inconsistent or invalid dimensions."""


class RankDeficientError(CrossedMFVBError):
    """A triangular QR factor has a (near-)zero diagonal entry.

    Signals an unidentifiable least squares system; we surface this
    rather than regularize.
    """


class NotPositiveDefiniteError(CrossedMFVBError):
    """A matrix required to be symmetric positive definite is not."""


class DimensionGuardError(CrossedMFVBError):
    """A dense oracle routine was asked to build a system that is too large."""


class UnsupportedPriorError(CrossedMFVBError):
    """The requested operation is not available for this prior family."""


class DegenerateSampleError(CrossedMFVBError):
    """A sample has zero variance, so no density estimate exists."""


class GridMismatchError(CrossedMFVBError):
    """Two densities were not evaluated on a common grid."""


class ParseError(CrossedMFVBError):
    """A CSV row could not be parsed (wrong arity or non-numeric field)."""


class EmptyDataError(CrossedMFVBError):
    """An input file contains no observation rows."""
