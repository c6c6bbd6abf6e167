"""Exception types raised across the toolkit."""


class CompCseError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(CompCseError, ValueError):
    pass


class SingularChannelError(CompCseError, ValueError):
    pass


class MalformedRecordError(CompCseError, ValueError):
    pass


class DegenerateFeatureError(CompCseError, ValueError):
    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"feature {index} has zero variance on the train split")


class InvalidBatchError(CompCseError, ValueError):
    pass


class InvalidCacheError(CompCseError, RuntimeError):
    pass


class InvalidLabelsError(CompCseError, ValueError):
    pass


class DivergedTrainingError(CompCseError, FloatingPointError):
    pass


class CheckpointFormatError(CompCseError, ValueError):
    pass


class ConfigError(CompCseError, ValueError):
    pass
