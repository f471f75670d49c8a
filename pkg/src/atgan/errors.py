"""Exception taxonomy shared across the package."""


class AtganError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AtganError):
    """Invalid configuration key, value, or profile selection."""


class ContractError(AtganError):
    """A caller violated an operation precondition (shapes, ranges, labels)."""


class DataFormatError(AtganError):
    """A dataset file failed to parse; the message names the offending offset or key."""


class AttackError(AtganError):
    """An attack iteration failed, e.g. a non-finite gradient."""


class TrainingDivergedError(AtganError):
    """A training loss went non-finite or exceeded the divergence guard."""


class CheckpointError(AtganError):
    """A checkpoint container is corrupt, mismatched, or from an unknown version."""
