"""Exception hierarchy shared across the package.

Everything derives from :class:`MVStereoError` so the CLI can map any
data/geometry problem to a single exit code while usage errors stay separate.
"""

from __future__ import annotations


class MVStereoError(Exception):
    """Base class for all package-specific errors."""


# --- geometry ---------------------------------------------------------------

class InvalidCameraError(MVStereoError):
    """Camera parameters violate the pinhole-model invariants."""


class BehindCameraError(MVStereoError):
    """A point projected with non-positive camera-frame depth."""


class NonPositiveDepthError(MVStereoError):
    """A depth value that must be strictly positive was not."""


class OutOfBoundsError(MVStereoError):
    """A pixel coordinate left the valid image rectangle."""


class DegenerateGeometryError(MVStereoError):
    """A plane/ray configuration with no stable solution."""


# --- imaging ----------------------------------------------------------------

class TooSmallError(MVStereoError):
    """Image too small for the requested pyramid/downsample operation."""


# --- segmentation -----------------------------------------------------------

class EmptyPatchError(MVStereoError):
    """A deformed patch with no usable sample coordinates."""


# --- refinement -------------------------------------------------------------

class InvalidFrameError(MVStereoError):
    """Tangent frame vectors are not orthonormal to the normal."""


# --- emopt ------------------------------------------------------------------

class DegenerateSumsError(MVStereoError):
    """Anchor cost sums unusable for the weight solve (non-finite/negative)."""


class TooFewAnchorsError(MVStereoError):
    """Fewer valid anchors than min_anchors; the weight update is skipped."""


# --- ioformats --------------------------------------------------------------

class ParseError(MVStereoError):
    """Structured-text input (manifest, config, matches, RLE) is malformed."""


class MissingFileError(MVStereoError):
    """A file referenced by a manifest or command line does not exist."""


class DimensionMismatchError(MVStereoError):
    """Array dimensions disagree with what the context requires."""


class DecodeError(MVStereoError):
    """An image or label file could not be decoded."""


class MagicMismatchError(MVStereoError):
    """A binary file does not start with the expected magic bytes."""


class TruncatedFileError(MVStereoError):
    """A binary file ended before its declared payload."""


class ConfigError(MVStereoError):
    """Unknown or invalid configuration key/value."""


# --- synthkit ---------------------------------------------------------------

class UnknownPresetError(MVStereoError):
    """Requested synthetic preset does not exist."""
