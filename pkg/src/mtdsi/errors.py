"""Exception types raised across the toolkit.

All of them derive from ``ValueError`` so callers that only care about
"bad input" can catch that, while tests and the CLI can be specific.
"""


class MtdsiError(ValueError):
    """Base class for toolkit errors."""


class AudioFormatError(MtdsiError):
    """Unsupported WAV codec or malformed audio file."""


class ChannelCountError(AudioFormatError):
    """Input audio is not mono."""


class SampleRateError(AudioFormatError):
    """Sample rate differs from the one required by the pipeline."""


class SignalLengthError(MtdsiError):
    """A signal or segment is too short (or too long) for the operation."""


class DegenerateSignalError(MtdsiError):
    """Silent or zero-energy input where a level is required."""


class ShapeError(MtdsiError):
    """Matrix dimensions do not match what the operation expects."""


class InsufficientFramesError(SignalLengthError):
    """Utterance has too few frames for the requested analysis."""


class MatrixFormatError(MtdsiError):
    """Binary matrix / posteriorgram file could not be parsed."""


class PosteriorValidationError(MtdsiError):
    """A posteriorgram row is not a probability distribution."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class RankError(MtdsiError):
    """Regression design is rank deficient."""


class UnidentifiableFitError(MtdsiError):
    """Psychometric data do not constrain the fit (e.g. all saturated)."""


class PipelineError(MtdsiError):
    """Batch run failed (too many skipped rows, failed fits, ...)."""
