"""Exception hierarchy shared across the package.

The CLI maps these to exit codes: configuration problems exit 2, data
problems exit 3, numerical failures exit 4.
"""


class SubnetError(Exception):
    """Base class for all package errors."""


class ConfigError(SubnetError):
    """Invalid configuration, shapes, topology, or usage."""


class ShapeError(ConfigError):
    """Operands with incompatible shapes."""


class InputError(ConfigError):
    """Invalid runtime input values (labels out of range, bad batch)."""


class UsageError(ConfigError):
    """An API called outside its contract (non-scalar loss, bad step index)."""


class TopologyError(ConfigError):
    """A mask refers to layers or blocks the model does not declare."""


class ValidationError(ConfigError):
    """A mask assignment violates its invariants."""


class DataError(SubnetError):
    """Dataset files missing, truncated, or malformed."""


class NumericalError(SubnetError):
    """Non-finite values where finite ones are required."""


class ProtocolError(SubnetError):
    """An internal invariant of the training protocol was broken."""
