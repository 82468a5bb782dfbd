"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericError -> 3,
CheckpointError and OSError -> 4.
"""


class MixprecError(Exception):
    """Base class for all package errors."""


class ShapeError(MixprecError):
    """Operand shapes are incompatible (no broadcasting anywhere)."""


class NumericError(MixprecError):
    """A computation produced NaN/Inf or an ill-conditioned operand."""


class ConditioningError(NumericError):
    """A matrix is rank-deficient or too ill-conditioned to proceed."""


class TrainingDivergedError(NumericError):
    """Training loss became non-finite."""


class ConfigError(MixprecError):
    """Invalid, unknown, or missing configuration."""


class InfeasibleBudgetError(ConfigError):
    """No bit assignment can satisfy the requested budget."""


class DataError(MixprecError):
    """Invalid dataset contents (labels out of range, empty data)."""


class CheckpointError(MixprecError):
    """Base class for checkpoint encode/decode failures."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """Unsupported checkpoint format version."""


class CheckpointTruncatedError(CheckpointError):
    """File ends mid-record or carries trailing bytes."""


class CheckpointCodeRangeError(CheckpointError):
    """A decoded level index lies outside its quantization table."""


class CheckpointFieldError(CheckpointError):
    """A header or layer field holds an invalid value."""
