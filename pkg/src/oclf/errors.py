"""Exception hierarchy shared by every oclf module."""


class OclfError(Exception):
    """Base class for all library errors."""


class InvalidInput(OclfError, ValueError):
    pass


class InvalidBlockGeometry(InvalidInput):
    pass


class DegenerateLandmarks(InvalidInput):
    pass


class InvalidLandmarks(InvalidInput):
    pass


class MaskShapeMismatch(InvalidInput):
    pass


class FaceNotFound(OclfError):
    pass


class MissingAnnotation(OclfError):
    pass


class NumericalError(OclfError, ArithmeticError):
    pass


class ConfigError(OclfError, ValueError):
    pass


class InputShapeError(InvalidInput):
    pass


class DimensionError(InvalidInput):
    pass


class CheckpointCorrupt(OclfError):
    pass


class VersionError(OclfError):
    pass


class NoVoters(OclfError, ValueError):
    pass


class ModelNotLoaded(OclfError):
    pass


class DegenerateDataset(OclfError, ValueError):
    pass


class DivergenceError(OclfError, ArithmeticError):
    pass


class ManifestNotFound(OclfError, FileNotFoundError):
    pass


class ManifestInvalid(OclfError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SplitMissing(OclfError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "split missing"
