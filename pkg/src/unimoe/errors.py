"""Exception types shared across the package.

Every error raised by library code derives from UnimoeError so callers can
catch one base class at CLI boundaries and map it to an exit code.
"""


class UnimoeError(Exception):
    """Base class for all package-specific errors."""


class ConfigInvalid(UnimoeError):
    """A run configuration failed validation."""


class ShapeMismatch(UnimoeError):
    """Array arguments disagree on a required dimension."""


class DimMismatch(ShapeMismatch):
    """Embedding or codebook dimensions disagree."""


class GridMismatch(ShapeMismatch):
    """A latent grid does not match the pyramid it is paired with."""


class PyramidMismatch(ShapeMismatch):
    """Two pyramid descriptions that must agree do not."""


class EmptyAttentionRow(UnimoeError):
    """An attention query row has no visible key; softmax is undefined."""


class IndexOutOfVocab(UnimoeError):
    """A target id lies outside the logits' vocabulary axis."""


class NonFiniteGradient(UnimoeError):
    """A gradient check produced NaN or infinity."""


class BadHeadDim(UnimoeError):
    """A head dimension cannot be split into rotation pairs."""


class KTooLarge(UnimoeError):
    """Requested top-k exceeds the number of candidate experts."""


class AllZeroLoads(UnimoeError):
    """Expert load statistics sum to zero, so balance is undefined."""


class SpecIncompatible(UnimoeError):
    """A sub-model description does not fit the model it is applied to."""


class EmptyPyramid(UnimoeError):
    """A scale pyramid with no scales was supplied."""


class CodeOutOfRange(UnimoeError):
    """A codec code id exceeds its codebook size."""


class ModeMissingGroundTruth(UnimoeError):
    """Teacher-forced decoding was requested without ground-truth codes."""


class InvalidWorkload(UnimoeError):
    """A rollout scheduling workload violates the simulator's contract."""


class CheckpointMissing(UnimoeError):
    """A checkpoint path does not exist or lacks required arrays."""


class EMANotWarm(UnimoeError):
    """A loss rescaler was asked to scale before its running average exists."""
