"""Error taxonomy shared across the package.

Each class maps onto one failure kind so callers (and the CLI, which
translates them into exit codes) can react without string matching.
"""


class DhatError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(DhatError, ValueError):
    """Operand shapes do not conform to an operation's rules."""


class ArgumentError(DhatError, ValueError):
    """A value-level precondition on an argument was violated."""


class StateError(DhatError, RuntimeError):
    """The object is not in a state that permits the requested action."""


class ArchitectureError(DhatError, ValueError):
    """A network specification is internally inconsistent."""


class NumericError(DhatError, ArithmeticError):
    """A forward computation produced NaN or Inf from finite inputs."""


class CheckpointError(DhatError, ValueError):
    """A checkpoint file is malformed or inconsistent with the network."""


class FormatError(DhatError, ValueError):
    """An input data file does not match its declared binary format."""


class ConfigError(DhatError, ValueError):
    """A run configuration failed schema validation."""
