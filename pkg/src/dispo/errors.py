"""Exception types raised across the package."""


class DispoError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DispoError, ValueError):
    """A layout or config value failed validation."""


class ContractError(DispoError, ValueError):
    """An operation was called with arguments violating its contract."""


class NoSupportError(DispoError):
    """No outcome at a state meets the requested support threshold."""


class UnsupportedOperationError(DispoError):
    """The model backend does not implement the requested query."""


class UntrainedModelError(DispoError):
    """A model was queried before training."""


class CheckpointError(DispoError):
    """A checkpoint or dataset file is corrupt, truncated or has the wrong version."""
