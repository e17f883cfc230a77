"""Exception types shared across the engine."""


class PaneError(Exception):
    """Base class for all engine errors."""


class ShapeError(PaneError, ValueError):
    """Tensor/layer shapes are inconsistent with the requested operation."""


class FormatError(PaneError, ValueError):
    """A serialized file (weights, tensor, image) violates its format."""


class NumericError(PaneError, ArithmeticError):
    """A non-finite value was produced or supplied in checked mode."""
