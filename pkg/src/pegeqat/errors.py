"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operation."""


class ContractError(ValueError):
    """A precondition on the call was violated."""


class ConfigError(ValueError):
    """Invalid configuration key or value."""


class FormatError(ValueError):
    """A data or checkpoint file is malformed."""


class CheckpointError(ValueError):
    """A checkpoint does not match the model it is loaded into."""


class DegenerateIntervalError(ValueError):
    """Quantization interval has zero width."""


class NonFiniteError(FloatingPointError):
    """A forward value or the training loss became NaN or infinite."""
