"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2,
EvaluationError -> 3, VolumeIOError -> 4.
"""


class MicroforgeError(Exception):
    """Base class for all package errors."""


class ConfigError(MicroforgeError):
    """Invalid or inconsistent run configuration."""


class VolumeIOError(MicroforgeError):
    """Reading or writing a voxel volume failed."""


class DimensionMismatchError(VolumeIOError):
    """Payload size does not match the dimensions declared in the header."""


class InvalidLabelError(VolumeIOError):
    """A voxel carries a label outside the three-phase coding."""

    def __init__(self, message: str, offset=None):
        super().__init__(message)
        self.offset = offset


class EvaluationError(MicroforgeError):
    """A property evaluation failed in a way the caller asked to be fatal."""


class ExternalGeneratorError(EvaluationError):
    """The external generator process failed or produced a bad volume."""

    def __init__(self, message: str, stderr: str = ""):
        super().__init__(message)
        self.stderr = stderr


class FitError(MicroforgeError):
    """Every hyperparameter optimisation start failed."""
