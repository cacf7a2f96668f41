"""Exception types raised across the package."""


class IDShieldError(Exception):
    """Base class for all package errors."""


class DegenerateLandmarks(IDShieldError, ValueError):
    """Landmarks do not determine an affine transform (collinear or rank deficient)."""


class SingularTransform(IDShieldError, ValueError):
    """An affine matrix with (near) zero determinant was asked to be inverted."""


class ShapeMismatch(IDShieldError, ValueError):
    pass


class ZeroFeature(IDShieldError, ArithmeticError):
    """A feature vector is too small to normalize or compare by angle."""


class BranchMismatch(IDShieldError, ValueError):
    pass


class TooSmall(IDShieldError, ValueError):
    pass


class EmptyDataset(IDShieldError, ValueError):
    pass


class NonFiniteLoss(IDShieldError, FloatingPointError):
    def __init__(self, message, step=None, stage=None):
        super().__init__(message)
        self.step = step
        self.stage = stage


class ConfigError(IDShieldError, ValueError):
    pass
