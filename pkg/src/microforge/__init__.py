"""Closed-loop generation and optimisation of three-phase electrode
microstructures.

The package couples a latent-parameterised voxel generator to transport
and geometry property evaluators, and drives the pair with Gaussian
process surrogate optimisation.
"""

from .errors import (
    ConfigError,
    DimensionMismatchError,
    EvaluationError,
    ExternalGeneratorError,
    FitError,
    InvalidLabelError,
    MicroforgeError,
    VolumeIOError,
)
from .voxel import (
    Microstructure,
    Phase,
    read_volume,
    slice_profile,
    volume_fractions,
    write_volume,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DimensionMismatchError",
    "EvaluationError",
    "ExternalGeneratorError",
    "FitError",
    "InvalidLabelError",
    "MicroforgeError",
    "Microstructure",
    "Phase",
    "VolumeIOError",
    "read_volume",
    "slice_profile",
    "volume_fractions",
    "write_volume",
]
