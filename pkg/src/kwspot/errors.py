"""Exception types shared across the package.

Everything raised on purpose derives from KwsError so callers (and the CLI)
can distinguish domain faults from programming errors.
"""


class KwsError(Exception):
    """Base class for all package-level faults."""


class ManifestError(KwsError):
    """Manifest file missing, unparseable, or violating entry invariants."""


class MalformedWav(KwsError):
    """RIFF/WAVE structure is broken: bad header, truncation, empty data."""


class UnsupportedFormat(KwsError):
    """WAV is structurally valid but not 16-bit PCM mono."""


class SampleRateMismatch(KwsError):
    """Audio sample rate differs from what the model expects."""


class TooShort(KwsError):
    """Clip shorter than one analysis window."""


class DimensionMismatch(KwsError):
    """Tensor or feature shapes do not line up."""


class InvalidConfig(KwsError):
    """Configuration value out of range, unknown key, or inconsistent."""


class MinDurationTooLarge(KwsError):
    """Minimum-duration exclusion leaves no frames for some positive."""


class EmptyBatch(KwsError):
    """A loss was asked to reduce over zero utterances."""


class EmptyManifest(KwsError):
    """An operation that needs utterances received none."""


class MissingEndFrame(KwsError):
    """A constrained loss needs an end frame the manifest does not provide."""


class NoPositives(KwsError):
    """Operation needs at least one positive utterance."""


class NoNegatives(KwsError):
    """Operation needs at least one negative utterance."""


class NegativeLabelPresent(KwsError):
    """Classification protocol requires every label to be non-negative."""


class NonFiniteValue(KwsError):
    """A forward computation produced NaN or Inf."""


class NonFiniteGradient(KwsError):
    """A gradient contains NaN or Inf; the optimizer refuses to step."""


class GraphNotRecorded(KwsError):
    """backward() was called on a value without a recorded forward tape."""


class NoCheckpoints(KwsError):
    """Checkpoint directory holds nothing to average or resume from."""


class TargetUnreachable(KwsError):
    """No threshold on the curve reaches the requested false-alarm rate."""


class MalformedContainer(KwsError):
    """Model container bytes do not parse."""


class UnsupportedFormatVersion(KwsError):
    """Model container written by an incompatible format version."""
