"""Exception types shared across the package."""


class HstuError(Exception):
    """Base class for all errors raised by ultrahstu."""


class DimensionError(HstuError, ValueError):
    """Array sizes or shapes do not agree."""


class DomainError(HstuError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class StateError(HstuError, RuntimeError):
    """An object was used before it was initialized or in the wrong mode."""


class ConfigError(HstuError, ValueError):
    """A model or run configuration is inconsistent."""


class VocabularyError(HstuError, IndexError):
    """An id falls outside its embedding table."""


class NotSupportedError(HstuError, NotImplementedError):
    """A declared option has no implementation."""


class TrainingDivergedError(HstuError, FloatingPointError):
    """Loss became non-finite during training."""

    def __init__(self, message, batch_id=None, dump_path=None):
        super().__init__(message)
        self.batch_id = batch_id
        self.dump_path = dump_path
