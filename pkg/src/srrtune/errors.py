"""Exception hierarchy shared across the package."""


class SRRError(Exception):
    """Base class for every error raised by srrtune."""


class GeometryError(SRRError):
    pass


class ShapeError(SRRError, ValueError):
    pass


class ResolutionError(SRRError):
    pass


class TableError(SRRError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class MaskError(SRRError, ValueError):
    pass


class DomainError(SRRError, ValueError):
    pass


class InputError(SRRError, ValueError):
    pass


class DegenerateInputError(SRRError, ValueError):
    pass


class DescriptorError(SRRError, ValueError):
    pass


class DivergenceError(SRRError, ArithmeticError):
    """Raised when an iterative solver produces non-finite values."""

    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"non-finite iterate at iteration {iteration}")


class NiftiError(SRRError):
    pass


class BadMagicError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedFileError(NiftiError):
    pass
