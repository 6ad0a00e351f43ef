"""Exception hierarchy shared by all cityprobe modules."""


class CityProbeError(Exception):
    """Base class for every error raised by this package."""


# dataset
class MissingColumn(CityProbeError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DuplicatePlace(CityProbeError, ValueError):
    pass


class EmptyDataset(CityProbeError, ValueError):
    pass


class TooFewPlaces(CityProbeError, ValueError):
    pass


class UnknownPlace(CityProbeError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


# llm gateway
class ReplayMiss(CityProbeError, LookupError):
    pass


class ProviderError(CityProbeError):
    def __init__(self, status, body):
        super().__init__(f"provider returned HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body


class Timeout(CityProbeError, TimeoutError):
    pass


class AuthMissing(CityProbeError):
    pass


# parsing
class ParseError(CityProbeError, ValueError):
    pass


class NoJsonFound(ParseError):
    pass


class MissingKey(ParseError):
    def __init__(self, key):
        super().__init__(f"missing key {key!r}")
        self.key = key


class Unparseable(ParseError):
    def __init__(self, key, value):
        super().__init__(f"cannot read a number for {key!r} from {value!r}")
        self.key = key
        self.value = value


class WrongCount(ParseError):
    pass


class DuplicateName(ParseError):
    pass


class EmptySchema(CityProbeError, ValueError):
    pass


# features
class EmptyMatrix(CityProbeError, ValueError):
    pass


class DimensionMismatch(CityProbeError, ValueError):
    pass


class MixedHiddenDim(CityProbeError, ValueError):
    pass


class HiddenStateFormatError(CityProbeError, ValueError):
    pass


# ml
class LengthMismatch(CityProbeError, ValueError):
    pass


class Empty(CityProbeError, ValueError):
    pass


class TooFewRows(CityProbeError, ValueError):
    pass


class Singular(CityProbeError, ArithmeticError):
    pass


class ColumnMismatch(CityProbeError, ValueError):
    pass


class FoldTooSmall(CityProbeError, ValueError):
    pass


class NoOverlap(CityProbeError, ValueError):
    pass


# diagnostics
class TooFewRepeats(CityProbeError, ValueError):
    pass


class ConstantInput(CityProbeError, ValueError):
    pass


class TooShort(CityProbeError, ValueError):
    pass


class NonPositiveBaseline(CityProbeError, ValueError):
    pass


class StageError(CityProbeError):
    """Wraps an error raised inside one pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
