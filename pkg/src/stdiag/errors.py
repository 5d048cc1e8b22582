"""Exception taxonomy shared by all modules.

The CLI maps these onto distinct exit codes (see ``stdiag.cli``), so new
error sites should raise the most specific class that applies.
"""


class StdiagError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(StdiagError):
    """Invalid configuration value or inconsistent parameter combination."""


class DimensionError(StdiagError):
    """Array shapes incompatible with the requested operation."""


class ContractError(StdiagError):
    """A documented precondition was violated by the caller."""


class NumericError(StdiagError):
    """Non-finite values or numerically divergent state."""


class IngestionError(StdiagError):
    """Malformed or inconsistent input data files."""
