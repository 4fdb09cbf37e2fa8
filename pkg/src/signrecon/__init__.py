"""Side information-guided normalisation for undersampled MRI reconstruction."""

from .errors import (
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    CorruptCheckpointError,
    DegenerateSliceError,
    InvalidInputError,
    SignReconError,
    TrainingDivergedError,
)

__version__ = "0.1.0"

__all__ = [
    "SignReconError",
    "InvalidInputError",
    "ConfigError",
    "DegenerateSliceError",
    "TrainingDivergedError",
    "CheckpointError",
    "CorruptCheckpointError",
    "CheckpointVersionError",
    "__version__",
]
