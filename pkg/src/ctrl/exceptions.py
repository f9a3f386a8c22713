"""Exception taxonomy shared across the package.

The CLI maps these onto stable exit codes (see ctrl.cli).
"""


class CtrlError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(CtrlError):
    """Bad arguments, malformed config, or an invalid operation request."""


class DataError(CtrlError):
    """Malformed input data, schema mismatches, or unusable datasets."""


class CheckpointError(DataError):
    """Corrupt, truncated, or incompatible checkpoint files."""


class NumericError(CtrlError):
    """Non-finite values, divergence, or other numeric failures."""


class ShapeError(CtrlError):
    """Operands with incompatible shapes passed to a tensor operation."""
