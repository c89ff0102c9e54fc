"""Exception types shared across the package.

The CLI maps each class to a distinct exit code, so library code should
raise the most specific one that applies.
"""


class FetalIqaError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(FetalIqaError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class ManifestError(FetalIqaError, ValueError):
    """Malformed manifest row, unknown label string, or missing image file."""


class NumericError(FetalIqaError, ArithmeticError):
    """Non-finite value encountered where finite numerics are required."""


class NoReliableMasksError(FetalIqaError, ValueError):
    """Every raw mask in a stack fell below the area threshold."""
