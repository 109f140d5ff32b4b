"""Exception hierarchy shared by all rimcodec modules."""


class RimcodecError(Exception):
    """Base class for all errors raised by this package."""


class ZeroRange(RimcodecError):
    """A point too close to the sensor origin has no defined shot direction."""


class DimensionMismatch(RimcodecError):
    """Array shapes of images, calibration, or pose tracks are inconsistent."""


class NoPreviousFrame(RimcodecError):
    """Temporal context was requested but no previous frame is available."""


class MissingPreviousFrame(RimcodecError):
    """A temporal encode/decode needs the previous decoded frame."""


class WeightShapeMismatch(RimcodecError):
    """Weight bundle layer widths do not chain, or do not match the input."""


class CorruptStream(RimcodecError):
    """A coded payload is truncated, damaged, or internally inconsistent."""


class UnknownWeights(RimcodecError):
    """The weight digest in a frame header is not in the registry."""


class HeaderMismatch(RimcodecError):
    """A frame header disagrees with the supplied calibration or sidecar."""


class EmptyCloud(RimcodecError):
    """A point-cloud metric was called on an empty cloud."""


class TooFewPoints(RimcodecError):
    """Not enough points for neighborhood-based estimation."""


class ZeroPoints(RimcodecError):
    """Bits-per-point is undefined for a frame with no valid returns."""
