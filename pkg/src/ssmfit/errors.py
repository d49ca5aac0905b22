"""Exception types shared across the package."""


class SsmFitError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateModelError(SsmFitError):
    """Training data has no usable variance or an invalid mode request."""


class DegenerateNormalError(SsmFitError):
    """A designated normal triangle has (numerically) collinear vertices."""


class EmptySliceError(SsmFitError):
    """A slicing plane missed the mesh after the allowed number of retries."""


class MeshNotClosedError(SsmFitError):
    """Ray-parity test found inconsistent crossings; the mesh is not watertight."""


class LabelMismatchError(SsmFitError):
    """A labelled point has no model component carrying the same label."""


class NumericalError(SsmFitError):
    """A numerical failure (collapsed scale, non-PD system, underflow)."""


class FormatError(SsmFitError):
    """A file does not conform to one of the documented formats."""
