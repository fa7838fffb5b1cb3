"""Exception types shared across the package."""


class MegaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MegaError):
    """An operation received tensors whose shapes do not conform.

    Carries the operation kind and the offending shapes so callers (and
    error messages) can name exactly what went wrong.
    """

    def __init__(self, kind, shapes, detail=""):
        self.kind = kind
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{kind}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TapeError(MegaError):
    """Misuse of the differentiation tape (detached loss, off-tape parameter,
    non-differentiable gradients where differentiable ones are required)."""


class NumericError(MegaError):
    """A numeric failure: non-finite loss or gradient, zero-norm row where a
    direction is required, or a failed gradient check."""


class DataError(MegaError):
    """Malformed or missing input data (dataset files, parameter files)."""


class ConfigError(MegaError):
    """Invalid configuration or command-line usage."""
