"""Exception hierarchy; the CLI maps each class to an exit code."""


class TpsrError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 3


class UsageError(TpsrError):
    """Bad command line usage."""

    exit_code = 1


class ConfigError(TpsrError):
    """Inconsistent or invalid configuration."""

    exit_code = 1


class DataError(TpsrError):
    """Missing, undecodable or inconsistent input data."""

    exit_code = 2


class CheckpointError(DataError):
    """Checkpoint version, checksum or tensor-shape problem."""


class TrainingError(TpsrError):
    """Optimization failed (e.g. non-finite loss)."""

    exit_code = 3
