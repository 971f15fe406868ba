"""Exception taxonomy shared by the whole package.

The CLI maps these onto stable exit codes: configuration problems -> 2,
file/format problems -> 3, numeric failures -> 4.
"""


class DuoformerError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DuoformerError):
    """Invalid configuration: bad geometry, unknown keys, illegal mode combos."""


class DimensionError(DuoformerError):
    """Shape mismatch between operands; the message names the shapes involved."""


class ContractError(DuoformerError):
    """An operation was called in a way its contract forbids (misuse, not config)."""


class FormatError(DuoformerError):
    """A file or byte stream does not conform to its declared format."""


class NumericError(DuoformerError):
    """A numeric failure (NaN/Inf loss, degenerate statistics) aborted an operation."""
