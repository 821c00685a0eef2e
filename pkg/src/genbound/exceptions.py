"""Error types raised by the public API."""


class GenboundError(Exception):
    """Base class for all library errors."""


class ShapeError(GenboundError):
    """Array arguments have inconsistent or unexpected dimensions."""


class CacheMismatchError(GenboundError):
    """A backward pass received a cache from a different forward call."""


class IdxFormatError(GenboundError):
    """An IDX file could not be parsed."""


class IdxMagicError(IdxFormatError):
    """The IDX magic number does not match the expected record type."""


class IdxTruncatedError(IdxFormatError):
    """The IDX file ends before the payload announced in its header."""


class IdxDimensionError(IdxFormatError):
    """IDX dimensions are inconsistent (e.g. image/label counts differ)."""


class ConfigError(GenboundError):
    """An experiment configuration is invalid."""


class NonFiniteLossError(GenboundError):
    """Training produced a NaN or infinite loss.

    Carries a diagnostic record of where the divergence happened.
    """

    def __init__(self, step: int, epoch: int, value: float):
        self.step = step
        self.epoch = epoch
        self.value = value
        super().__init__(
            f"non-finite loss {value!r} at step {step} (epoch {epoch})"
        )
