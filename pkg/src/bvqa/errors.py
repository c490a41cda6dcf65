"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1 (usage),
DataError and subclasses -> 2, NumericError -> 3. Library code raises the
most specific type it can so callers keep the distinction.
"""


class BvqaError(Exception):
    """Base class for all package errors."""


class ConfigError(BvqaError):
    """Invalid configuration value or flag combination."""


class DataError(BvqaError):
    """Malformed or inconsistent input data."""


class ManifestError(DataError):
    """Bad dataset manifest; message carries the offending row number."""


class FeatureFileError(DataError):
    """Corrupt, truncated or otherwise unreadable feature file."""


class ShapeError(DataError):
    """Array shape mismatch; message names the pipeline stage."""


class CheckpointError(DataError):
    """Unreadable checkpoint or unsupported checkpoint version."""


class DegenerateInputError(DataError):
    """A statistic is undefined for this input (e.g. zero rank variance)."""


class NumericError(BvqaError):
    """Non-finite values or a failed numerical verification."""
