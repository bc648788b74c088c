"""Exception types raised across the pipeline."""


class PMCGANError(Exception):
    """Base class for all pipeline errors."""


class ShapeMismatch(PMCGANError, ValueError):
    pass


class MissingInstance(PMCGANError, KeyError):
    pass


class HeightOutOfRange(PMCGANError, ValueError):
    pass


class EmptyDataset(PMCGANError):
    pass


class InvalidStage(PMCGANError, ValueError):
    pass


class MissingAsset(PMCGANError, FileNotFoundError):
    pass


class MissingCheckpoint(PMCGANError, FileNotFoundError):
    pass


class NonFiniteLoss(PMCGANError, FloatingPointError):
    def __init__(self, message, terms=None):
        super().__init__(message)
        self.terms = dict(terms or {})


class DimensionMismatch(PMCGANError, ValueError):
    pass


class NonConvergent(PMCGANError, ArithmeticError):
    pass


class InsufficientData(PMCGANError):
    pass


class NoValidPlacement(PMCGANError):
    pass


class ConfigError(PMCGANError, ValueError):
    pass
