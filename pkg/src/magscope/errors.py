"""Exception types shared across the magscope pipeline."""


class MagscopeError(Exception):
    """Base class for all magscope-specific failures."""


class ManifestError(MagscopeError):
    """Slide manifest file is malformed or inconsistent."""


class UnavailableLevelError(MagscopeError):
    """Requested magnification exceeds the slide's base objective power."""


class OutOfBoundsError(MagscopeError):
    """Requested patch window does not fit inside the base image."""


class ModelLoadError(MagscopeError):
    """Interchange-format model file is missing pieces or malformed."""


class WrongOutputDimError(ModelLoadError):
    """Loaded model's tapped output does not have the expected width."""


class TrainingDivergedError(MagscopeError):
    """Optimization produced a non-finite loss."""
