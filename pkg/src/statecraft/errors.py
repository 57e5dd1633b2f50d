class StatecraftError(Exception):
    """Base class for every error raised by the engine."""


class ShapeError(StatecraftError, ValueError):
    pass


class NumericError(StatecraftError, FloatingPointError):
    """A NaN or Inf appeared where finite values were required."""


class StateError(StatecraftError, RuntimeError):
    pass


class ConfigError(StatecraftError, ValueError):
    pass


class DegenerateBatchError(StatecraftError, ValueError):
    pass


class DataError(StatecraftError, ValueError):
    pass


class FormatError(StatecraftError, ValueError):
    """A weights archive or manifest is malformed."""


class WeightsMismatchError(StatecraftError, ValueError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class TrainingAborted(StatecraftError, RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
