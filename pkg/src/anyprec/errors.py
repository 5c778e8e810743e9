"""Exception types shared across the package."""


class AnyPrecError(Exception):
    """Base class for all package errors."""


class DimensionError(AnyPrecError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class InputError(AnyPrecError, ValueError):
    """An input value violates an operation's precondition."""


class UsageError(AnyPrecError, RuntimeError):
    """The API was called in an unsupported way."""


class ConfigError(AnyPrecError, ValueError):
    """An architecture or experiment config is malformed."""


class FormatError(AnyPrecError, ValueError):
    """A serialized file does not match its expected binary format."""


class PrecisionUnavailableError(AnyPrecError, LookupError):
    """A bit-width was requested that no BatchNorm bank can serve."""

    def __init__(self, bits, available=()):
        self.bits = bits
        self.available = sorted(available)
        super().__init__(
            f"bit-width {bits} has no BatchNorm state (available: {self.available}); "
            f"train with it or calibrate it first"
        )


class DivergenceError(AnyPrecError, RuntimeError):
    """Training produced a non-finite loss. Carries the failing step index."""

    def __init__(self, step, message="non-finite loss", snapshot=None):
        self.step = step
        self.snapshot = snapshot
        super().__init__(f"{message} at step {step}")


class UndefinedStatisticError(AnyPrecError, ValueError):
    """A statistic was requested over an empty set of valid samples."""
