"""Exception types shared across the toolkit."""


class ChangekitError(ValueError):
    """Base class for all toolkit errors."""


class ConfigError(ChangekitError):
    """Invalid configuration object or checkpoint metadata."""


class ShapeError(ChangekitError):
    """Array/tensor dimensions violate an operation's contract."""


class InputError(ChangekitError):
    """Input values violate an operation's contract (NaN, empty, non-normalized...)."""


class ParameterError(ChangekitError):
    """Scalar parameter outside its allowed range."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered; message carries the offending batch seed."""
