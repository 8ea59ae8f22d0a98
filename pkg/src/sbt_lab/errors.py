"""Exception hierarchy shared by all modules.

Exit-code mapping used by the CLI: contract/config/dimension/format
problems exit 1, numeric failures exit 2.
"""


class SbtError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SbtError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(SbtError):
    """A precondition of an operation was violated."""


class ConfigError(SbtError):
    """A model/tracker configuration is invalid."""


class FormatError(SbtError):
    """An on-disk artifact (checkpoint, dataset) is malformed."""


class NumericError(SbtError):
    """A non-finite value appeared where finite math was required."""
