"""Exception types shared across the toolkit.

Everything derives from ValueError or RuntimeError so callers that do not
care about the fine-grained type can catch the builtin ones.
"""


class ConfigError(ValueError):
    """A parameter struct or config file violates its documented constraints."""


class DimensionMismatchError(ValueError):
    """Array arguments disagree with the declared channel/step layout."""


class InsufficientDataError(ValueError):
    """Not enough samples to perform the requested operation."""


class DegenerateChannelError(ValueError):
    """A channel has max == min, so a min-max scaler cannot be fit on it."""


class IncompatibleRateError(ValueError):
    """Source rate is not an integer multiple of the requested target rate."""


class SeriesTooShortError(ValueError):
    """Time series is too short for filtering / differentiation."""


class UnscaledInputError(ValueError):
    """A value fed to the network lies far outside [-1, 1]; scaling was likely forgotten."""


class NonFiniteStateError(RuntimeError):
    """Integration or optimization produced NaN/Inf."""


class CheckpointError(ValueError):
    """Checkpoint files are missing, inconsistent or corrupt."""
