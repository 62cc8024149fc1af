"""Exception types raised by the toolkit.

Every operation either returns a fully validated value or raises one of
these; nothing escapes half-constructed. The CLI maps them onto its exit
codes (1 = I/O, 2 = usage/config/data, 3 = divergence).
"""


class HydroEmbedError(Exception):
    """Base class for all toolkit errors."""


# --- file parsing ---------------------------------------------------------

class ParseError(HydroEmbedError):
    """Base class for ingest failures."""


class MalformedLine(ParseError):
    def __init__(self, line_no, reason):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class NonConsecutiveDates(ParseError):
    pass


class EmptyFile(ParseError):
    pass


class NegativeDischarge(ParseError):
    pass


class DuplicateBasinId(ParseError):
    pass


class NonNumericAttribute(ParseError):
    pass


class InconsistentColumnCount(ParseError):
    pass


class MissingAttributeFile(HydroEmbedError):
    pass


class NoValidBasins(HydroEmbedError):
    pass


# --- sampling / standardization -------------------------------------------

class EmptyTrainingPeriod(HydroEmbedError):
    pass


class EmptySampleSet(HydroEmbedError):
    pass


# --- model -----------------------------------------------------------------

class BasinIndexOutOfRange(HydroEmbedError):
    pass


class NonFiniteActivation(HydroEmbedError):
    """Forward pass produced NaN/inf; the training run is aborted."""


class TapeReuse(HydroEmbedError):
    pass


class MissingBasinStd(HydroEmbedError):
    pass


# --- persistence -----------------------------------------------------------

class VersionMismatch(HydroEmbedError):
    pass


class CorruptFile(HydroEmbedError):
    pass


class IoFailure(HydroEmbedError):
    pass


class IncompatibleCheckpoint(HydroEmbedError):
    pass


# --- metrics ----------------------------------------------------------------

class ZeroVarianceObserved(HydroEmbedError):
    pass


class LengthMismatch(HydroEmbedError):
    pass


# --- configuration ----------------------------------------------------------

class ConfigError(HydroEmbedError):
    pass
