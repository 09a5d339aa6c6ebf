"""Exception types raised across the package."""


class SDCoNetError(Exception):
    """Base class for all package errors."""


class ConfigError(SDCoNetError, ValueError):
    """Invalid or inconsistent configuration."""


class ShapeError(SDCoNetError, ValueError):
    """Tensor or array shape does not satisfy an operation's contract."""


class ContractError(SDCoNetError, ValueError):
    """Input violates an operation's precondition."""


class DegenerateBoxError(ContractError):
    """Box with zero or negative extent."""


class GenerationError(SDCoNetError, RuntimeError):
    """Synthetic scene could not be generated within the retry budget."""


class AnnotationError(SDCoNetError, ValueError):
    """Malformed annotation file."""


class TrainingError(SDCoNetError, RuntimeError):
    """Training aborted, e.g. on a non-finite loss."""
