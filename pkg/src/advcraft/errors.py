"""Exception types shared across the library."""


class AdvcraftError(Exception):
    """Base class for all library errors."""


class ShapeError(AdvcraftError, ValueError):
    """Tensor shapes do not conform for the requested operation."""


class NonFiniteError(AdvcraftError, ValueError):
    """A tensor contains NaN or Inf."""


class TapeError(AdvcraftError, RuntimeError):
    """Misuse of a gradient tape (e.g. a second backward pass)."""


class ArchitectureError(AdvcraftError, ValueError):
    """Consecutive layer specs are not shape-compatible."""


class ConfigError(AdvcraftError, ValueError):
    """Invalid or incoherent configuration."""


class ParameterError(AdvcraftError, ValueError):
    """Transform parameters violate their invariants."""


class SelectionError(AdvcraftError, ValueError):
    """Not enough qualifying examples for the requested selection."""


class DataFormatError(AdvcraftError, ValueError):
    """Base for dataset parse failures."""


class IdxMagicError(DataFormatError):
    """IDX file magic number does not match the expected value."""


class IdxCountError(DataFormatError):
    """Image and label files disagree on the number of examples."""


class IdxTruncatedError(DataFormatError):
    """IDX file ends before the declared payload."""


class CheckpointError(AdvcraftError, ValueError):
    """Base for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unknown format version."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint file ends before the declared payload."""


class CheckpointChecksumError(CheckpointError):
    """Stored checksum does not match the file contents."""
