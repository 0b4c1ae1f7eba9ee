"""Exception hierarchy shared by every module."""


class AvatarError(Exception):
    """Base class for all errors raised by gsavatar."""


class PointBehindCamera(AvatarError, ValueError):
    pass


class DegenerateAxis(AvatarError, ValueError):
    pass


class EmptyMesh(AvatarError, ValueError):
    pass


class JointCountMismatch(AvatarError, ValueError):
    pass


class WeightRowNotNormalized(AvatarError, ValueError):
    pass


class LayoutTemplateMismatch(AvatarError, ValueError):
    pass


class ResolutionMismatch(AvatarError, ValueError):
    pass


class NonFiniteActivation(AvatarError, FloatingPointError):
    pass


class ShapeMismatch(AvatarError, ValueError):
    pass


class NonUnitQuaternion(AvatarError, ValueError):
    pass


class NonPositiveScale(AvatarError, ValueError):
    pass


class ForwardStateMissing(AvatarError, RuntimeError):
    pass


class EmptyInput(AvatarError, ValueError):
    pass


class EmptyDataset(AvatarError, ValueError):
    pass


class TrainingDiverged(AvatarError, FloatingPointError):
    pass


class InvalidT(AvatarError, ValueError):
    pass


class EmptyBatch(AvatarError, ValueError):
    pass


class EmptyVideo(AvatarError, ValueError):
    pass


class FrozenViolation(AvatarError, AssertionError):
    pass


class OddNative(AvatarError, ValueError):
    pass


class LayoutMismatch(AvatarError, ValueError):
    pass


class MissingFile(AvatarError, FileNotFoundError):
    pass


class SchemaViolation(AvatarError, ValueError):
    pass


class ImageTooSmall(AvatarError, ValueError):
    pass


class InvalidConfig(AvatarError, ValueError):
    pass
