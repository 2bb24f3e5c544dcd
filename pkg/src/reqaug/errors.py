"""Exception hierarchy shared across the pipeline.

Three branches map to distinct CLI exit codes: ConfigError (2), DataError (3),
NumericalError (4).
"""


class ReqaugError(Exception):
    """Base class for all package errors."""


class ConfigError(ReqaugError):
    """Bad configuration, unknown formats, unresolvable paths."""


class DataError(ReqaugError):
    """Inputs that violate an operation's preconditions."""


class NumericalError(ReqaugError):
    """Non-finite or otherwise unusable numeric state."""


# --- ingest ---------------------------------------------------------------

class EmptyRequest(DataError):
    pass


class UnreadablePath(ConfigError):
    pass


class UnknownFormat(ConfigError):
    pass


class EmptyCorpus(DataError):
    pass


class DegenerateSplit(DataError):
    pass


# --- lexicon --------------------------------------------------------------

class OutOfRange(DataError):
    pass


# --- lm -------------------------------------------------------------------

class VocabTooSmall(ConfigError):
    pass


class UnknownId(DataError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class SequenceTooLong(DataError):
    pass


class NoMaskToken(DataError):
    pass


class MultipleMaskTokens(DataError):
    pass


# --- augment ----------------------------------------------------------------

class ZeroVector(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class NoMaskableToken(DataError):
    pass


class ReservedPosition(DataError):
    pass


class IndexOutOfRange(DataError):
    pass


class NoViableCandidate(DataError):
    pass


class NotADistribution(DataError):
    pass


class EmptyInput(DataError):
    pass


# --- detect -----------------------------------------------------------------

class SingleClassInput(DataError):
    pass


class EmptyCalibrationSet(DataError):
    pass


# --- metrics ----------------------------------------------------------------

class LengthMismatch(DataError):
    pass


class EmptyCandidate(DataError):
    pass


class WeightMismatch(DataError):
    pass


class NegativeCost(DataError):
    pass
