"""Exception hierarchy shared by every module."""


class ThermnetError(Exception):
    """Base class for all errors raised by this package."""


class CropTooLarge(ThermnetError, ValueError):
    pass


class NonFiniteTemperature(ThermnetError, ValueError):
    pass


class NonFiniteValue(ThermnetError, FloatingPointError):
    """A tensor picked up NaN or Inf during a forward or backward pass."""


class EmptyInput(ThermnetError, ValueError):
    pass


class ShapeMismatch(ThermnetError, ValueError):
    pass


class InvalidRate(ThermnetError, ValueError):
    pass


class LabelOutOfRange(ThermnetError, ValueError):
    pass


class InvalidConfig(ThermnetError, ValueError):
    pass


class StratificationImpossible(ThermnetError, ValueError):
    pass


class CorruptFile(ThermnetError, ValueError):
    pass


class EmptyClass(ThermnetError, ValueError):
    pass


class MixedFrameSizes(ThermnetError, ValueError):
    pass


class UnknownTag(ThermnetError, KeyError):
    pass


class ProtocolError(ThermnetError):
    """Any violation of the wire protocol."""


class BadMagic(ProtocolError):
    pass


class UnknownType(ProtocolError):
    pass


class LengthMismatch(ProtocolError):
    pass


class TruncatedPayload(ProtocolError):
    pass


class ConnectionLost(ThermnetError, ConnectionError):
    pass
