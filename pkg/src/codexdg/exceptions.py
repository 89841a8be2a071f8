"""Exception hierarchy shared across the package."""


class CodexError(Exception):
    """Base class for all errors raised by codexdg."""


class DimensionError(CodexError, ValueError):
    """Operand shapes do not conform."""


class ParameterError(CodexError, ValueError):
    """A scalar or structural parameter is outside its admissible range."""


class ContractError(CodexError, RuntimeError):
    """A caller violated an operation's precondition."""


class ModeError(CodexError, ValueError):
    """An operation was asked for a mode it does not support for this task."""


class NumericError(CodexError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class DataError(CodexError, ValueError):
    """A dataset is malformed, empty, or inconsistent with its header."""


class CheckpointError(CodexError, ValueError):
    """A checkpoint file is malformed or incompatible with the request."""


class ConfigError(CodexError, ValueError):
    """An experiment configuration or ablation grid failed validation."""
