"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor extents, channels or layouts do not agree."""


class AlignmentError(ShapeError):
    """Spatial extents are not multiples of the model's downsampling factor."""


class WeightMismatchError(ValueError):
    """A parameter set does not match the architecture it is used with."""


class TapeError(RuntimeError):
    """Backward was called with a stale, foreign or missing activation tape."""


class FormatError(ValueError):
    """A binary fixture or weight file is malformed."""
