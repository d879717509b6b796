"""Typed errors shared by every btc-chord module.

Each error carries a stable upper-case ``code`` that the CLI prints on its
one-line error report.
"""


class BtcError(ValueError):
    """Base class for all domain failures."""

    code = "BTC_ERROR"


class ConfigurationError(BtcError):
    code = "CONFIG"


class ShapeError(BtcError):
    """Dimension mismatch between tensors."""

    code = "SHAPE"


class DataError(BtcError):
    code = "DATA"


class ChordParseError(BtcError):
    code = "CHORD_PARSE"


class VocabularyError(BtcError):
    code = "VOCAB"


class UndefinedScoreError(BtcError):
    """Raised when a metric has zero comparable duration."""

    code = "UNDEFINED_SCORE"


class ConfigMismatchError(BtcError):
    """Checkpoint and feature file disagree on bins or vocabulary."""

    code = "CONFIG_MISMATCH"


class MissingCounterpartError(BtcError):
    code = "MISSING_COUNTERPART"


class FormatError(BtcError):
    code = "FORMAT"


class BadMagicError(FormatError):
    code = "BAD_MAGIC"


class TruncatedFileError(FormatError):
    code = "TRUNCATED"


class UnsupportedVersionError(FormatError):
    code = "UNSUPPORTED_VERSION"


class DuplicateTensorError(FormatError):
    code = "DUPLICATE_TENSOR"


class LabFormatError(FormatError):
    code = "LAB_FORMAT"
