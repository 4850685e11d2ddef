"""Exception types raised across the pipeline.

Every error derives from ``SrhError`` and from the closest builtin, so
callers can catch either ``SrhError`` or e.g. ``ValueError``.
"""

from __future__ import annotations


class SrhError(Exception):
    """Base class for all pipeline errors."""


class SlideFormatError(SrhError, ValueError):
    """Slide file does not follow the SRH1 layout."""


class SlideSizeError(SrhError, ValueError):
    """Slide payload or requested dimensions are too small."""


class SplitError(SrhError, ValueError):
    """Patient-level split cannot be built."""


class LabelError(SrhError, ValueError):
    """Class label is unknown or not allowed in this position."""


class ShapeError(SrhError, ValueError):
    """Array shapes disagree."""


class DegenerateNormError(SrhError, ArithmeticError):
    """Vector norm is too small to normalize."""


class ContractError(SrhError, ValueError):
    """Precondition of an operation is violated."""


class SamplerError(ContractError):
    """Batch violates the class-balanced sampler contract."""


class StateError(SrhError, RuntimeError):
    """Operation called in the wrong state (e.g. backward before forward)."""


class LeakageError(SrhError, RuntimeError):
    """Test patients overlap the patients used for training."""


class DegeneracyError(SrhError, ValueError):
    """Input carries no usable structure (e.g. all points identical)."""


class CheckpointError(SrhError, ValueError):
    """Checkpoint file is malformed or incompatible."""
