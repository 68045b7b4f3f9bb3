"""Exception types raised by jointtrack."""


class JointTrackError(Exception):
    """Base class for all jointtrack errors."""


class DegenerateRotation(JointTrackError, ValueError):
    pass


class EmptyCloud(JointTrackError, ValueError):
    pass


class NonPositiveVoxelSize(JointTrackError, ValueError):
    pass


class TooFewPoints(JointTrackError, ValueError):
    pass


class MissingNormals(JointTrackError, ValueError):
    pass


class NoCorrespondences(JointTrackError, RuntimeError):
    pass


class DegenerateInput(JointTrackError, ValueError):
    pass


class CameraOnPoint(JointTrackError, ValueError):
    pass


class NoPairs(JointTrackError, ValueError):
    pass


class SingularNormalMatrix(JointTrackError, ValueError):
    pass


class NoUsableFrames(JointTrackError, ValueError):
    pass


class AlignmentFailed(JointTrackError, RuntimeError):
    pass


class TooFewPoses(JointTrackError, ValueError):
    pass


class LengthMismatch(JointTrackError, ValueError):
    pass


class EmptyInput(JointTrackError, ValueError):
    pass


class TooFewFrames(JointTrackError, ValueError):
    pass


class ConfigError(JointTrackError, ValueError):
    pass
