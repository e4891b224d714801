"""Exception types shared across the package."""


class HbaError(Exception):
    """Base class; ``stage`` labels the pipeline stage that raised it."""

    stage = "hba"


class InputError(HbaError):
    """Invalid user input (exit code 2 at the command line)."""


class FormatError(InputError):
    stage = "io"


class EmptyScan(InputError):
    stage = "io"


class NonRigidRotation(FormatError):
    pass


class LengthMismatch(InputError):
    stage = "eval"


class ConfigError(InputError):
    stage = "config"


class AngleAtPi(HbaError):
    stage = "geometry"


class MissingPose(HbaError):
    stage = "voxel"


class NoFeatures(HbaError):
    stage = "ba"


class NonFiniteCost(HbaError):
    stage = "ba"


class SingularHessian(HbaError):
    stage = "ba"


class DisconnectedGraph(HbaError):
    stage = "pose-graph"


class DegenerateMap(InputError):
    stage = "eval"
