"""Exception types raised across the package."""


class SolidSlamError(Exception):
    """Base class for all package errors."""


class AngleNearPi(SolidSlamError):
    """Rotation angle too close to pi for a well-conditioned logarithm."""


class DegeneratePoint(SolidSlamError):
    """Point lies on the sensor's x = 0 plane, so its grid angles are undefined."""


class DegenerateEdge(SolidSlamError):
    """Two edge anchor points coincide."""


class DegeneratePlane(SolidSlamError):
    """Three plane anchor points are collinear."""


class InsufficientOverlap(SolidSlamError):
    """Too few timestamp-associated pose pairs to evaluate a trajectory."""


class ParseError(SolidSlamError):
    """Malformed line in an input file."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class MissingHeader(ParseError):
    """Point cloud file lacks a required header field."""


class ValidationError(SolidSlamError, ValueError):
    """Configuration or argument failed validation.

    ``key`` names the offending configuration key, when there is one.
    """

    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class EmptyDataset(SolidSlamError):
    """Dataset directory contains no frame files."""


class InsufficientFeatures(UserWarning):
    """A scan produced fewer edge or planar features than odometry needs."""
