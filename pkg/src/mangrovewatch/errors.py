"""Exception hierarchy shared by every stage."""


class MangroveWatchError(Exception):
    """Base class for all package errors."""


class AlignmentError(MangroveWatchError, ValueError):
    """Two rasters that must share a grid do not."""


class SchemaError(MangroveWatchError, ValueError):
    """Band names, channel counts or file layouts disagree."""


class ConfigurationError(MangroveWatchError, ValueError):
    pass


class UnsupportedCRSError(MangroveWatchError, ValueError):
    pass


class ShapeError(MangroveWatchError, ValueError):
    pass


class DataAvailabilityError(MangroveWatchError):
    """No scene qualifies for a requested year or window."""


class UndefinedLossError(MangroveWatchError, ValueError):
    pass


class TrainingDivergedError(MangroveWatchError, RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")


class DependencyError(MangroveWatchError):
    """An upstream artifact required by a pipeline stage is missing."""
