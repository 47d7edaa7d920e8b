"""Exception hierarchy shared by every featviz module."""


class FeatVizError(Exception):
    """Base class for all library errors."""


class ShapeError(FeatVizError, ValueError):
    """Tensor extents do not agree with what an operation needs."""


class NonFiniteError(ShapeError):
    """A tensor that must be finite holds NaN or Inf."""


class ConfigurationError(FeatVizError, ValueError):
    """A hyperparameter or option is invalid (bad stride, box too large, ...)."""


class FormatError(FeatVizError, ValueError):
    """A serialized blob (.fvt, FVNET, PPM/PGM) could not be decoded."""

    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ShapeChainError(FormatError, ShapeError):
    pass


class UnknownLayerError(FormatError):
    pass


class NumericalError(FeatVizError, ArithmeticError):
    """An iterative computation produced non-finite values."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step
