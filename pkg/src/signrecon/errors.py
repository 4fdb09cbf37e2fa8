"""Exception types shared across the package."""


class SignReconError(Exception):
    """Base class for package errors."""


class InvalidInputError(SignReconError, ValueError):
    """An operation received data violating its preconditions."""


class ConfigError(SignReconError, ValueError):
    """A configuration value is inconsistent or out of range."""


class DegenerateSliceError(SignReconError, ValueError):
    """A slice cannot be preprocessed (e.g. all-zero content)."""


class TrainingDivergedError(SignReconError, RuntimeError):
    """Training aborted on a non-finite loss; diagnostics were dumped."""


class CheckpointError(SignReconError, RuntimeError):
    """Base class for checkpoint load/save failures."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint file is unreadable or fails structural validation."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint magic/version/config hash does not match expectations."""
