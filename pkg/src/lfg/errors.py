"""Exception hierarchy shared across the pipeline.

Exit-code mapping used by the CLI: usage errors exit 2 (argparse),
ConfigError 3, DataError 4, NumericAbort 5.
"""


class LfgError(Exception):
    """Base class for package errors."""


class ConfigError(LfgError):
    """Invalid or inconsistent configuration value."""


class DataError(LfgError):
    """Input data violates a contract (bad mask, missing file, empty set)."""


class PlacementError(DataError):
    """No valid lesion placement found after the retry budget."""


class NumericAbort(LfgError):
    """A loss or gradient became non-finite; training must stop."""
