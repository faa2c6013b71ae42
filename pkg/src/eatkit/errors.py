"""Exception types raised across the package."""


class EatError(Exception):
    """Base class for all package errors."""


class ShapeError(EatError, ValueError):
    """Tensor or layer shapes are incompatible."""


class NonFiniteError(EatError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class TapeError(EatError, RuntimeError):
    """Misuse of a gradient tape (e.g. loss not recorded on it)."""


class ConfigError(EatError, ValueError):
    """Invalid configuration or experiment spec."""


class DatasetError(EatError, ValueError):
    """Malformed, truncated or empty dataset input."""


class CheckpointError(EatError, ValueError):
    """Checkpoint file is malformed or does not match the expected model."""


class DivergenceError(EatError, RuntimeError):
    """Training produced a non-finite loss or activation."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch
