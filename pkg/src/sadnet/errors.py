"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
NumericError -> 3. ConfigurationError signals a caller-side shape or
config mismatch and is treated as a usage error at the CLI boundary.
"""


class ConfigurationError(ValueError):
    """Incompatible shapes, channel counts, or model configuration."""


class UsageError(ValueError):
    """API misuse: bad argument values, missing gradients, etc."""


class DataError(Exception):
    """Malformed or missing input data (images, manifests, checkpoints)."""


class NumericError(Exception):
    """Non-finite values where finite ones are required (e.g. training loss)."""
