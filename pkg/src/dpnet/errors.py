"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, everything
below (data, format, contract) exits 2.
"""


class DpnetError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(DpnetError):
    """A caller violated an operation's precondition (shapes, ranges, ...)."""


class FormatError(DpnetError):
    """A file could not be parsed (bad magic, version, truncation, ...)."""


class ConfigError(DpnetError):
    """A configuration value or file is invalid."""


class DataError(DpnetError):
    """A dataset (manifest, labels, feature files) is inconsistent."""


class TrainingError(DpnetError):
    """Training hit a non-recoverable numerical problem."""
