"""Exception taxonomy shared across the package."""


class CascadeError(Exception):
    """Base class for all package errors."""


class ConfigError(CascadeError):
    """Invalid configuration value or combination."""


class ShapeError(CascadeError):
    """Array dimensions incompatible with the requested operation."""


class DataError(CascadeError):
    """Malformed or incomplete input data (missing columns, date gaps, ...)."""


class PlanningError(CascadeError):
    """Series too short (or otherwise unusable) for the requested segmentation."""


class ReconstructionError(CascadeError):
    """Segment predictions do not cover the range being reconstructed."""


class TrainingError(CascadeError):
    """Non-finite loss or gradient during optimization."""


class OracleError(CascadeError):
    """Verification oracle hit a non-finite evaluation."""


class UsageError(CascadeError):
    """API called with inconsistent arguments (missing trace, wrong mode, ...)."""
