"""Exception types raised by the engine."""


class SITError(Exception):
    """Base class for all engine errors."""


class ShapeMismatch(SITError, ValueError):
    pass


class InvalidKernel(SITError, ValueError):
    pass


class InvalidRate(SITError, ValueError):
    pass


class NonDeterministicLayer(SITError, RuntimeError):
    pass


class BadDimensions(SITError, ValueError):
    pass


class BadMagic(SITError, ValueError):
    pass


class UnsupportedVersion(SITError, ValueError):
    pass


class TruncatedPayload(SITError, ValueError):
    pass


class IoFailure(SITError, OSError):
    pass


class UnknownTensorName(SITError, KeyError):
    pass


class MissingTensor(SITError, KeyError):
    pass


class LengthMismatch(SITError, ValueError):
    pass


class EmptyBatch(SITError, ValueError):
    pass


class EmptyDataset(SITError, ValueError):
    pass


class DivergenceDetected(SITError, FloatingPointError):
    pass


class DegenerateVariance(SITError, ValueError):
    pass


class ConfigParseError(SITError, ValueError):
    pass
