"""Exception types raised across the package.

Every contract violation maps to a named exception so callers can tell
input mistakes apart from numerical failures.
"""


class SkelclError(Exception):
    """Base class for all package errors."""


# --- tensor / autograd ---------------------------------------------------


class ZeroNorm(SkelclError):
    """A row with (near-)zero L2 norm was passed to a normalizer."""


class EmptyMask(SkelclError):
    """A masked softmax was requested with no positive entries."""


class DetachedLoss(SkelclError):
    """backward() was called on a tensor that was not recorded on a tape."""


class NonDeterministic(SkelclError):
    """Two evaluations of a supposedly deterministic function disagreed."""


class NonFiniteValue(SkelclError):
    """An operation produced NaN or Inf."""


class ShapeMismatch(SkelclError):
    """Operand shapes are incompatible with the requested operation."""


# --- skeleton data -------------------------------------------------------


class TooShort(SkelclError):
    """Sequence has fewer frames than the operation requires."""


class UnknownStream(SkelclError):
    """A stream id outside {joint, bone, motion} was requested."""


class SeparabilityFailure(SkelclError):
    """Synthetic dataset failed its built-in separability check."""


class BadMagic(SkelclError):
    """File does not start with the expected magic bytes."""


class TruncatedFile(SkelclError):
    """File ended before the header-declared payload was read."""


# --- contrastive machinery ------------------------------------------------


class EmptyQueue(SkelclError):
    """A contrastive loss needs at least one stored negative."""


class BatchTooLarge(SkelclError):
    """Attempted to push more embeddings than the queue capacity."""


class QueueTooSmall(SkelclError):
    """Neighbor mining asked for more entries than the queue holds."""


class IndexOutOfRange(SkelclError):
    """A mined-neighbor index does not point into the queue."""


# --- training / evaluation -------------------------------------------------


class NonFiniteGradient(SkelclError):
    """An optimizer step received NaN or Inf gradients."""


class NonFiniteLoss(SkelclError):
    """Training produced a NaN/Inf loss; diagnostic state attached."""


class StreamMissing(SkelclError):
    """Checkpoint does not contain the requested stream."""


class EmptyTrainSplit(SkelclError):
    """An evaluation protocol got an empty training split."""


class EmptySubset(SkelclError):
    """A label fraction rounded some class down to zero samples."""


class LengthMismatch(SkelclError):
    """Per-stream score vectors disagree in length."""


# --- config / persistence --------------------------------------------------


class UnknownKey(SkelclError):
    """Config contains a key outside the documented set."""


class ConfigTypeError(SkelclError):
    """Config value has the wrong type for its key."""


class VersionMismatch(SkelclError):
    """Checkpoint was written by an incompatible format version."""


class HashMismatch(SkelclError):
    """Checkpoint config hash does not match its embedded config."""
