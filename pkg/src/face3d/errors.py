"""Typed exceptions shared across the package."""


class Face3DError(Exception):
    """Base class for all library errors."""


class DegenerateShape(Face3DError):
    """A keypoint set collapses to a shape with no usable extent."""


class DegenerateBox(Face3DError):
    """A bounding box has a non-positive width or height."""


class EmptySample(Face3DError):
    """A loss or metric was asked to average over zero samples."""


class LengthMismatch(Face3DError):
    """Paired sequences differ in length."""


class ShapeMismatch(Face3DError):
    """An array does not have the shape a layer expects."""


class StaleActivations(Face3DError):
    """backward() was called without a matching forward() pass."""


class PlacementFailure(Face3DError):
    """Could not place the requested number of faces on the canvas."""


class InsufficientBackground(Face3DError):
    """No grid cell lies outside every face bounding box."""


class DivergenceDetected(Face3DError):
    """Training produced a non-finite loss."""


class MissingEllipse(Face3DError):
    """Continuous-mode matching needs ellipses on both sides."""


class FileFormatError(Face3DError):
    """A structured text file violates the expected format."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no
