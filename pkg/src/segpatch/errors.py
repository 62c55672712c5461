"""Exception hierarchy.

Two roots: :class:`ValidationError` for bad inputs and broken contracts
(CLI exit code 2) and :class:`NumericalError` for failures discovered while
computing (CLI exit code 3).
"""


class SegPatchError(Exception):
    pass


class ValidationError(SegPatchError, ValueError):
    pass


class NumericalError(SegPatchError, ArithmeticError):
    pass


# core / io
class ShapeMismatch(ValidationError):
    pass


class LabelOutOfRange(ValidationError):
    pass


class BadSize(ValidationError):
    pass


class MissingLabel(ValidationError):
    pass


class SizeMismatch(ValidationError):
    pass


class CorruptMeta(ValidationError):
    pass


# model
class ChannelMismatch(ValidationError):
    pass


class LayerNotFound(ValidationError):
    pass


class NonFiniteGradient(NumericalError):
    """Raised when a gradient contains NaN/inf.

    ``last_patches`` optionally carries the last finite patch set so a caller
    can resume from it.
    """

    def __init__(self, message, last_patches=None):
        super().__init__(message)
        self.last_patches = last_patches


# placement
class InvalidFov(ValidationError):
    pass


class BehindCamera(NumericalError):
    pass


class DegenerateConfiguration(NumericalError):
    pass


class SingularHomography(NumericalError):
    pass


class PatchTooLarge(ValidationError):
    pass


# appearance
class BadRange(ValidationError):
    pass


# losses
class EmptyPixelSet(NumericalError):
    pass


class EmptyDomain(NumericalError):
    pass


class AllZeroGradients(NumericalError):
    pass


class NoOtherClass(ValidationError):
    pass


class PatchTooSmall(ValidationError):
    pass


# detector / metrics
class TooFewImages(ValidationError):
    pass


class EmptyScores(ValidationError):
    pass


class NoEvaluablePixels(NumericalError):
    pass
