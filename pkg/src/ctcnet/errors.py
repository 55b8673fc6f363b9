"""Error types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1 (usage),
DataError -> 2, NumericError -> 3.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Corrupt, missing, or contract-violating data."""


class NumericError(RuntimeError):
    """Non-finite values where finite ones are required (NaN/Inf loss etc.)."""
