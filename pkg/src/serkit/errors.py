"""Exception types raised across the toolkit.

Every error that callers are expected to catch has its own class so the CLI
can map failures onto exit codes (config/usage -> 1, data -> 2, numerical -> 3).
"""


class SerkitError(Exception):
    """Base class for all toolkit errors."""


# --- audio ---------------------------------------------------------------

class MalformedWav(SerkitError):
    """WAV header is invalid or the data chunk is truncated."""


class UnsupportedEncoding(SerkitError):
    """WAV encoding other than 16-bit PCM or 32-bit IEEE float."""


class ConstantSignal(SerkitError):
    """Signal has (near-)zero variance and cannot be standardized."""


class SignalTooShort(SerkitError):
    """Signal shorter than one analysis frame."""


# --- features ------------------------------------------------------------

class ShapeMismatch(SerkitError):
    """Operand shapes do not conform."""


class DegenerateFilter(SerkitError):
    """A Mel filter has no support on the FFT grid."""


class ConstantFeatures(SerkitError):
    """Feature map has (near-)zero variance and cannot be standardized."""


class CorruptCache(SerkitError):
    """Feature cache file is truncated or inconsistent."""


# --- autodiff ------------------------------------------------------------

class NotScalar(SerkitError):
    """backward() called on a non-scalar tensor."""


class GraphConsumed(SerkitError):
    """backward() called twice on the same recorded graph."""


class BatchTooSmall(SerkitError):
    """Batch statistics require at least two items in training mode."""


class LabelOutOfRange(SerkitError):
    """Class index outside [0, n_classes)."""


# --- checkpoints ---------------------------------------------------------

class BadCheckpoint(SerkitError):
    """Checkpoint is structurally broken (truncated, bad lengths)."""


class BadMagic(BadCheckpoint):
    """File does not start with the expected magic bytes."""


class VersionMismatch(BadCheckpoint):
    """Checkpoint format version is not supported."""


# --- training / evaluation -----------------------------------------------

class EmptySplit(SerkitError):
    """A split contains no utterances."""


class NonFiniteLoss(SerkitError):
    """Training loss became NaN/Inf; aborting instead of skipping batches."""


class InsufficientClassSamples(SerkitError):
    """Stratified splitting cannot place every label in every split."""


class LengthMismatch(SerkitError):
    """Paired label sequences differ in length (or are empty)."""


class EmptyMatrix(SerkitError):
    """Confusion matrix has zero total count."""


class ConfigError(SerkitError):
    """Run configuration is invalid or cannot be parsed."""
