"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad input: shape mismatch, out-of-range value, duplicate transmitter."""


class ShapeError(ValidationError):
    """Incompatible tensor shapes detected while building a graph."""


class GraphStateError(RuntimeError):
    """Backward requested on something that was never produced by a forward pass."""


class TransportError(ValueError):
    """Codebook index payload is malformed or out of range."""


class NumericalError(FloatingPointError):
    """A loss or metric became non-finite."""
